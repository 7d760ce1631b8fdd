//! Two-stage training loop, inference, ablation modes and the k-means baseline.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EncodedDataset, FeatureSlot, Schema};
use crate::embed::EmbeddingMatrix;
use crate::kmeans::{kmeans, Geometry, KMeansOptions};
use crate::losses::{
    alignment_loss, entropy_reg, proto_loss, sharpen_targets, soft_assign, soft_assign_value, total_loss, LossConfig,
    LossError, LossTerms, Stage,
};
use crate::model::{
    adapt_semantic, encode_tabular, init_centroids, init_params, project, renormalize_centroids, Branch, ModelDims,
    ModelError, ModelParams,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least k = {k} rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("dataset and embeddings are misaligned: {0}")]
    Misaligned(String),
    #[error("mode {mode} needs {what}")]
    MissingModality { mode: &'static str, what: &'static str },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: align={align:?} proto={proto:?} ent={ent:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        align: Option<f64>,
        proto: Option<f64>,
        ent: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Both branches, alignment warm-up then the full objective.
    #[default]
    Full,
    /// Tabular branch only, clustering losses from the first epoch.
    Ttc,
    /// Text branch only, clustering losses over the adapted embeddings.
    Tlc,
    /// Same training as `Full`; the caller supplies serialized-row anchors.
    Tcc,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Ttc => "ttc",
            Self::Tlc => "tlc",
            Self::Tcc => "tcc",
        }
    }

    pub fn uses_table(self) -> bool {
        self != Self::Tlc
    }

    pub fn uses_text(self) -> bool {
        self != Self::Ttc
    }

    fn aligns(self) -> bool {
        matches!(self, Self::Full | Self::Tcc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "T_warm", alias = "t_warm")]
    pub t_warm: usize,
    pub epochs_total: usize,
    /// `None` means `min(256, n)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub centroid_renorm: bool,
    pub normalize_backbone: bool,
    /// Reserved; only `false` is accepted.
    pub ent_ramp: bool,
    pub loss: LossConfig,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_warm: 50,
            epochs_total: 200,
            batch_size: None,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation_mode: AblationMode::Full,
            centroid_renorm: true,
            normalize_backbone: false,
            ent_ramp: false,
            loss: LossConfig::default(),
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.effective_warmup() >= self.epochs_total {
            return Err(TrainError::Config(format!(
                "T_warm ({}) must be below epochs_total ({})",
                self.effective_warmup(),
                self.epochs_total
            )));
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return Err(TrainError::Config(format!("batch_size must be at least 2, got {b}")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::Config("moment decays must lie in [0, 1) and epsilon must be positive".into()));
        }
        if self.ent_ramp {
            return Err(TrainError::Config("ent_ramp is reserved and must be false".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn effective_batch_size(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(256).min(n)
    }

    /// Warm-up length actually used by the configured mode.
    pub fn effective_warmup(&self) -> usize {
        if self.ablation_mode.aligns() {
            self.t_warm
        } else {
            0
        }
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch < self.effective_warmup() {
            Stage::Warmup
        } else {
            Stage::Refine
        }
    }
}

/// Adam with a separate step count per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            m: zeros.clone(),
            t: vec![0; zeros.len()],
            v: zeros,
        }
    }

    /// Updates `param` (slot `index`) from `grad`.
    pub fn update(&mut self, index: usize, param: &mut Tensor, grad: &Tensor) {
        self.t[index] += 1;
        let t = self.t[index] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (self.m[index].data_mut(), self.v[index].data_mut());
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Everything training needs besides parameters.
pub struct TrainInputs<'a> {
    pub dataset: &'a EncodedDataset,
    pub embeddings: Option<&'a EmbeddingMatrix>,
}

impl TrainInputs<'_> {
    fn check(&self, mode: AblationMode, k: usize) -> Result<(), TrainError> {
        let n = self.dataset.n;
        if n < k {
            return Err(TrainError::TooFewRows { n, k });
        }
        if mode.uses_text() {
            let e = self.embeddings.ok_or(TrainError::MissingModality {
                mode: mode.name(),
                what: "an embedding matrix",
            })?;
            if e.row_ids != self.dataset.row_ids {
                return Err(TrainError::Misaligned(format!(
                    "{} embedding rows vs {} dataset rows or differing row ids",
                    e.n(),
                    n
                )));
            }
        }
        Ok(())
    }

    fn embedding_rows(&self, positions: &[usize], normalize: bool) -> Result<Tensor, TrainError> {
        let e = self.embeddings.expect("checked");
        let rows = e.vectors.select_rows(positions).map_err(ModelError::from)?;
        if normalize {
            Ok(rows.l2_normalize_rows().map_err(ModelError::from)?)
        } else {
            Ok(rows)
        }
    }
}

/// Loss values of one step or one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub align: Option<f64>,
    pub proto: Option<f64>,
    pub ent: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    #[serde(rename = "L_align")]
    pub l_align: Option<f64>,
    #[serde(rename = "L_proto")]
    pub l_proto: Option<f64>,
    #[serde(rename = "L_ent")]
    pub l_ent: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per epoch; `with_time = false` zeroes wall time for byte comparisons.
    pub fn to_jsonl(&self, with_time: bool) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if !with_time {
                r.seconds = 0.0;
            }
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_jsonl(true).as_bytes()))
            .map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn series(&self, pick: impl Fn(&EpochRecord) -> Option<f64>) -> Vec<Option<f64>> {
        self.records.iter().map(pick).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `n × k` soft assignments.
    pub soft: Tensor,
    /// `n × d` representations the clustering was read from.
    pub embeddings: Tensor,
}

/// Representations and centroids at the moment clustering starts.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidInit {
    pub epoch: usize,
    pub z: Tensor,
    pub centroids: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: TrainLog,
    pub result: ClusterResult,
    pub centroid_init: CentroidInit,
}

struct Forward {
    tape: Tape,
    vars: Vec<Var>,
    total: Var,
    losses: StepLosses,
}

fn forward(
    params: &ModelParams,
    inputs: &TrainInputs,
    positions: &[usize],
    config: &TrainConfig,
    stage: Stage,
) -> Result<Forward, TrainError> {
    let mode = config.ablation_mode;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let z_tab = if mode.uses_table() {
        let h = encode_tabular(&mut tape, &bound, &inputs.dataset.layout, &inputs.dataset.batch(positions))?;
        Some(project(&mut tape, &bound, Branch::Tab, h)?)
    } else {
        None
    };
    let needs_text = mode.aligns() || mode == AblationMode::Tlc;
    let z_txt = if needs_text {
        let e = tape.constant(inputs.embedding_rows(positions, config.normalize_backbone)?);
        let g = adapt_semantic(&mut tape, &bound, e)?;
        Some(project(&mut tape, &bound, Branch::Txt, g)?)
    } else {
        None
    };

    let mut terms = LossTerms::default();
    if mode.aligns() {
        terms.align = Some(alignment_loss(&mut tape, z_tab.expect("table branch"), z_txt.expect("text branch"), config.loss.tau_align)?);
    }
    if stage == Stage::Refine {
        let z = if mode == AblationMode::Tlc { z_txt } else { z_tab }.expect("clustered branch");
        let p = soft_assign(&mut tape, z, bound.centroids, config.loss.tau_proto)?;
        let q = sharpen_targets(tape.value(p));
        terms.proto = Some(proto_loss(&mut tape, p, &q)?);
        terms.ent = Some(entropy_reg(&mut tape, p)?);
    }
    let total = total_loss(&mut tape, terms, &config.loss, stage)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item());
    let losses = StepLosses {
        align: value(terms.align),
        proto: value(terms.proto),
        ent: value(terms.ent),
        total: tape.value(total).item(),
    };
    Ok(Forward {
        vars: bound.vars(),
        tape,
        total,
        losses,
    })
}

fn is_finite(l: &StepLosses) -> bool {
    l.total.is_finite() && [l.align, l.proto, l.ent].iter().flatten().all(|v| v.is_finite())
}

/// One optimizer step on the rows at `positions`. Only parameters reached by the
/// loss are updated; centroids are renormalized afterwards when configured.
pub fn step(
    params: &mut ModelParams,
    adam: &mut Adam,
    inputs: &TrainInputs,
    positions: &[usize],
    config: &TrainConfig,
    stage: Stage,
) -> Result<StepLosses, TrainError> {
    if positions.len() < 2 {
        return Err(TrainError::Config("a step needs at least 2 rows".into()));
    }
    let f = forward(params, inputs, positions, config, stage)?;
    if !is_finite(&f.losses) {
        return Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            align: f.losses.align,
            proto: f.losses.proto,
            ent: f.losses.ent,
        });
    }
    let grads = f.tape.backward(f.total).map_err(ModelError::from)?;
    let mut touched_centroids = false;
    let centroid_slot = f.vars.len() - 1;
    for (i, (param, var)) in params.tensors_mut().into_iter().zip(&f.vars).enumerate() {
        if let Some(g) = grads.get(*var) {
            adam.update(i, param, g);
            touched_centroids |= i == centroid_slot;
        }
    }
    if touched_centroids && config.centroid_renorm {
        renormalize_centroids(&mut params.centroids)?;
    }
    Ok(f.losses)
}

/// Full-dataset representations for the clustered branch of `mode`.
pub fn represent(params: &ModelParams, inputs: &TrainInputs, config: &TrainConfig) -> Result<Tensor, TrainError> {
    let positions: Vec<usize> = (0..inputs.dataset.n).collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let z = if config.ablation_mode == AblationMode::Tlc {
        let e = tape.constant(inputs.embedding_rows(&positions, config.normalize_backbone)?);
        let g = adapt_semantic(&mut tape, &bound, e)?;
        project(&mut tape, &bound, Branch::Txt, g)?
    } else {
        let h = encode_tabular(&mut tape, &bound, &inputs.dataset.layout, &inputs.dataset.all())?;
        project(&mut tape, &bound, Branch::Tab, h)?
    };
    Ok(tape.value(z).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(soft: &Tensor) -> Vec<usize> {
    soft.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ModelParams, inputs: &TrainInputs, config: &TrainConfig) -> Result<ClusterResult, TrainError> {
    let z = represent(params, inputs, config)?;
    let soft = soft_assign_value(&z, &params.centroids, config.loss.tau_proto)?;
    Ok(ClusterResult {
        assignments: argmax_rows(&soft),
        soft,
        embeddings: z,
    })
}

/// Row order for `epoch`: a fixed permutation drawn from stream `epoch` of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Splits an epoch order into batches, dropping a trailing batch of one row.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size.max(1)).filter(|b| b.len() >= 2).collect()
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn train(inputs: &TrainInputs, schema: &Schema, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let schema_k = schema.k_star;
    let mode = config.ablation_mode;
    inputs.check(mode, schema_k)?;
    let d_plm = inputs.embeddings.map_or(1, |e| e.dim);
    let mut params = init_params(schema, &config.model, d_plm, config.seed)?;
    let mut adam = Adam::new(&params, config);
    let n = inputs.dataset.n;
    let batch_size = config.effective_batch_size(n);
    let warm = config.effective_warmup();
    let mut log = TrainLog::default();
    let mut centroid_init = None;

    for epoch in 0..config.epochs_total {
        let started = Instant::now();
        let stage = config.stage_at(epoch);
        if epoch == warm {
            let z = represent(&params, inputs, config)?;
            let centroids = init_centroids(&z, schema_k, config.seed)?;
            params.centroids = centroids.clone();
            centroid_init = Some(CentroidInit { epoch, z, centroids });
        }
        let order = epoch_order(n, config.seed, epoch);
        let mut seen = Vec::new();
        for (b, positions) in batches(&order, batch_size).into_iter().enumerate() {
            let losses = step(&mut params, &mut adam, inputs, positions, config, stage).map_err(|e| match e {
                TrainError::NonFinite { align, proto, ent, .. } => {
                    log::error!("non-finite loss at epoch {epoch}, batch {b}");
                    TrainError::NonFinite {
                        epoch,
                        batch: b,
                        align,
                        proto,
                        ent,
                    }
                }
                other => other,
            })?;
            seen.push(losses);
        }
        let pick = |f: fn(&StepLosses) -> Option<f64>| mean_of(&seen.iter().map(f).collect::<Vec<_>>());
        let record = EpochRecord {
            epoch,
            stage,
            l_align: pick(|l| l.align),
            l_proto: pick(|l| l.proto),
            l_ent: pick(|l| l.ent),
            l_total: pick(|l| Some(l.total)).unwrap_or(f64::NAN),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch} {:?} total {:.6}", stage, record.l_total);
        log.records.push(record);
    }

    let result = predict(&params, inputs, config)?;
    Ok(TrainOutput {
        params,
        log,
        result,
        centroid_init: centroid_init.expect("warm-up is shorter than training"),
    })
}

/// One-hot categorical columns next to the standardized numeric ones.
pub fn baseline_features(dataset: &EncodedDataset) -> Tensor {
    let widths: usize = dataset
        .layout
        .iter()
        .map(|s| match s {
            FeatureSlot::Numeric(_) => 1,
            FeatureSlot::Categorical { cardinality, .. } => *cardinality,
        })
        .sum();
    let mut data = Vec::with_capacity(dataset.n * widths);
    for i in 0..dataset.n {
        for slot in &dataset.layout {
            match *slot {
                FeatureSlot::Numeric(c) => data.push(dataset.numeric_values.get(i, c)),
                FeatureSlot::Categorical { column, cardinality } => {
                    let idx = dataset.categorical_indices[i][column];
                    data.extend((0..cardinality).map(|j| if j == idx { 1.0 } else { 0.0 }));
                }
            }
        }
    }
    Tensor::matrix(dataset.n, widths, data).expect("feature matrix")
}

/// Euclidean k-means with k-means++ seeding and 10 restarts.
pub fn run_kmeans_baseline(dataset: &EncodedDataset, k: usize, seed: u64) -> Result<ClusterResult, TrainError> {
    if k == 0 || dataset.n < k {
        return Err(TrainError::TooFewRows { n: dataset.n, k });
    }
    let x = baseline_features(dataset);
    let r = kmeans(
        &x,
        k,
        &KMeansOptions {
            geometry: Geometry::Euclidean,
            n_init: 10,
            max_iter: 300,
            seed,
        },
    );
    let mut soft = Tensor::zeros(vec![dataset.n, k]);
    for (i, &a) in r.assignments.iter().enumerate() {
        soft.set(i, a, 1.0);
    }
    Ok(ClusterResult {
        assignments: r.assignments,
        soft,
        embeddings: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode, parse_table};

    fn toy() -> (Schema, EncodedDataset, EmbeddingMatrix) {
        let schema = Schema::from_json(
            r#"{"dataset_name":"toy","k_star":2,"features":[
                {"name":"x","kind":"numeric"},
                {"name":"c","kind":"categorical","categories":["a","b"]}
            ]}"#,
        )
        .unwrap();
        let rows = "0.1,a\n0.2,a\n0.0,a\n0.3,a\n2.1,b\n2.4,b\n1.9,b\n2.2,b\n";
        let data = encode(&parse_table(rows, &schema).unwrap(), &schema).unwrap();
        let vecs: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let s = if i < 4 { 1.0 } else { -1.0 };
                vec![s, 0.1 * i as f64, (i as f64).sin()]
            })
            .collect();
        let emb = EmbeddingMatrix::new(Tensor::from_rows(&vecs).unwrap(), (0..8).collect(), "toy").unwrap();
        (schema, data, emb)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            t_warm: 3,
            epochs_total: 8,
            batch_size: Some(4),
            learning_rate: 1e-2,
            model: ModelDims {
                d_e: 4,
                h1: 16,
                h2: 8,
                h_p: 8,
                d: 4,
                proj_depth: 2,
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            t_warm: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: Some(1),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            ent_ramp: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().effective_batch_size(101), 101);
        assert_eq!(TrainConfig::default().effective_batch_size(1000), 256);
    }

    #[test]
    fn stage_contract_and_determinism() {
        let (schema, data, emb) = toy();
        let inputs = TrainInputs {
            dataset: &data,
            embeddings: Some(&emb),
        };
        let cfg = small_config();
        let a = train(&inputs, &schema, &cfg).unwrap();
        let b = train(&inputs, &schema, &cfg).unwrap();
        assert_eq!(a.log.to_jsonl(false), b.log.to_jsonl(false));
        assert_eq!(a.result.assignments, b.result.assignments);
        assert_eq!(a.params, b.params);

        assert_eq!(a.log.records.len(), 8);
        for r in &a.log.records {
            if r.epoch < 3 {
                assert_eq!(r.stage, Stage::Warmup);
                assert!(r.l_proto.is_none() && r.l_ent.is_none() && r.l_align.is_some());
            } else {
                assert_eq!(r.stage, Stage::Refine);
                assert!(r.l_proto.is_some() && r.l_ent.is_some() && r.l_align.is_some());
            }
        }
        assert_eq!(a.centroid_init.epoch, 3);
        for n in a.params.centroids.row_norms() {
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(a.result.assignments.iter().all(|&c| c < 2));
    }

    #[test]
    fn warmup_leaves_centroids_and_zero_rate_leaves_everything() {
        let (schema, data, emb) = toy();
        let inputs = TrainInputs {
            dataset: &data,
            embeddings: Some(&emb),
        };
        let cfg = small_config();
        let mut params = init_params(&schema, &cfg.model, emb.dim, 1).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&params, &cfg);
        step(&mut params, &mut adam, &inputs, &[0, 1, 5, 6], &cfg, Stage::Warmup).unwrap();
        assert_eq!(params.centroids, before.centroids);
        assert_ne!(params.tabular.mlp, before.tabular.mlp);

        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let mut params = before.clone();
        let mut adam = Adam::new(&params, &frozen);
        step(&mut params, &mut adam, &inputs, &[0, 1, 5, 6], &frozen, Stage::Warmup).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn small_step_descends() {
        let (schema, data, emb) = toy();
        let inputs = TrainInputs {
            dataset: &data,
            embeddings: Some(&emb),
        };
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            ..small_config()
        };
        let positions: Vec<usize> = (0..8).collect();
        let mut params = init_params(&schema, &cfg.model, emb.dim, 2).unwrap();
        params.centroids = init_centroids(&represent(&params, &inputs, &cfg).unwrap(), 2, 0).unwrap();
        let mut adam = Adam::new(&params, &cfg);
        let before = step(&mut params, &mut adam, &inputs, &positions, &cfg, Stage::Refine).unwrap().total;
        let after = forward(&params, &inputs, &positions, &cfg, Stage::Refine).unwrap().losses.total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn modality_isolation() {
        let (schema, data, emb) = toy();
        let ttc = TrainConfig {
            ablation_mode: AblationMode::Ttc,
            ..small_config()
        };
        let without = train(&TrainInputs { dataset: &data, embeddings: None }, &schema, &ttc).unwrap();
        let scrambled = emb.permuted(&[7, 6, 5, 4, 3, 2, 1, 0]);
        let with = train(
            &TrainInputs {
                dataset: &data,
                embeddings: Some(&scrambled),
            },
            &schema,
            &ttc,
        )
        .unwrap();
        assert_eq!(without.result.assignments, with.result.assignments);
        assert!(without.log.records.iter().all(|r| r.stage == Stage::Refine && r.l_align.is_none()));

        let tlc = TrainConfig {
            ablation_mode: AblationMode::Tlc,
            ..small_config()
        };
        let a = train(&TrainInputs { dataset: &data, embeddings: Some(&emb) }, &schema, &tlc).unwrap();
        let mut shuffled = data.clone();
        let col: Vec<f64> = (0..8).map(|i| data.numeric_values.get(7 - i, 0)).collect();
        for (i, v) in col.into_iter().enumerate() {
            shuffled.numeric_values.set(i, 0, v);
        }
        let b = train(&TrainInputs { dataset: &shuffled, embeddings: Some(&emb) }, &schema, &tlc).unwrap();
        assert_eq!(a.result.assignments, b.result.assignments);
        assert_eq!(a.log.to_jsonl(false), b.log.to_jsonl(false));

        assert!(matches!(
            train(&TrainInputs { dataset: &data, embeddings: None }, &schema, &small_config()),
            Err(TrainError::MissingModality { .. })
        ));
    }

    #[test]
    fn predict_tie_and_exact_match() {
        let soft = Tensor::from_rows(&[vec![0.25; 4], vec![0.1, 0.2, 0.7, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&soft), vec![0, 2]);
        let mu = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        let p = soft_assign_value(&z, &mu, 0.5).unwrap();
        assert_eq!(argmax_rows(&p), vec![2]);
    }

    #[test]
    fn batching_rules() {
        let order: Vec<usize> = (0..9).collect();
        assert_eq!(batches(&order, 4).len(), 2);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(epoch_order(10, 1, 3), epoch_order(10, 1, 3));
        assert_ne!(epoch_order(10, 1, 3), epoch_order(10, 1, 4));
    }

    #[test]
    fn baseline_cases() {
        let schema = Schema::from_json(r#"{"dataset_name":"b","k_star":2,"features":[{"name":"x","kind":"numeric"},{"name":"y","kind":"numeric"}]}"#).unwrap();
        let mut rows = String::new();
        for i in 0..10 {
            let off = if i < 5 { 0.0 } else { 50.0 };
            rows.push_str(&format!("{},{}\n", off + (i as f64 * 0.37).sin(), off + (i as f64 * 0.91).cos()));
        }
        let data = encode(&parse_table(&rows, &schema).unwrap(), &schema).unwrap();
        let truth: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        let r = run_kmeans_baseline(&data, 2, 0).unwrap();
        assert_eq!(crate::metrics::clustering_accuracy(&r.assignments, &truth).unwrap(), 1.0);
        assert_eq!(r.assignments, run_kmeans_baseline(&data, 2, 0).unwrap().assignments);
        assert!(run_kmeans_baseline(&data, 1, 0).unwrap().assignments.iter().all(|&a| a == 0));
        assert!(run_kmeans_baseline(&data, 11, 0).is_err());
    }
}
