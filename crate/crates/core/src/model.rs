//! Tabular encoder, semantic adapter, projection heads and centroids.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{feature_layout, FeatureSlot, Schema, TabularBatch};
use crate::kmeans::{kmeans, Geometry, KMeansOptions};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("need at least k = {k} rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] serde_json::Error),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_e: usize,
    pub h1: usize,
    pub h2: usize,
    pub h_p: usize,
    pub d: usize,
    /// Number of linear layers in each projection head.
    pub proj_depth: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_e: 16,
            h1: 256,
            h2: 128,
            h_p: 128,
            d: 64,
            proj_depth: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.d_e, self.h1, self.h2, self.h_p, self.d, self.proj_depth];
        if all.contains(&0) {
            return Err(ModelError::InvalidDims(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Affine map `x·w + b` with `w: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            w: glorot(fan_in, fan_out, rng),
            b: Tensor::zeros(vec![1, fan_out]),
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoderParams {
    /// One `1 × d_e` map per numeric feature, in schema order.
    pub numeric: Vec<Linear>,
    /// One `|categories| × d_e` table per categorical feature, in schema order.
    pub embeddings: Vec<Tensor>,
    /// `m·d_e → h1 → h2`.
    pub mlp: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticAdapterParams {
    /// `D_plm × h2`.
    pub linear: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Tab,
    Txt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub d_plm: usize,
    pub seed: u64,
    pub schema_fingerprint: String,
    pub tabular: TabularEncoderParams,
    pub semantic: SemanticAdapterParams,
    pub head_tab: ProjectionHead,
    pub head_txt: ProjectionHead,
    /// `k × d`, unit rows.
    pub centroids: Tensor,
}

fn head(dims: &ModelDims, rng: &mut ChaCha20Rng) -> ProjectionHead {
    let mut widths = vec![dims.h2];
    widths.extend(std::iter::repeat(dims.h_p).take(dims.proj_depth - 1));
    widths.push(dims.d);
    ProjectionHead {
        layers: widths.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect(),
    }
}

/// Glorot-uniform weights and zero biases. Each parameter group draws from its own
/// stream of the seed, so the tabular branch does not depend on `d_plm`.
pub fn init_params(schema: &Schema, dims: &ModelDims, d_plm: usize, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    if d_plm == 0 {
        return Err(ModelError::InvalidDims("embedding dimension must be positive".into()));
    }
    let stream = |s: u64| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let mut rng = stream(0);
    let mut numeric = Vec::new();
    let mut embeddings = Vec::new();
    for slot in feature_layout(schema) {
        match slot {
            FeatureSlot::Numeric(_) => numeric.push(Linear::glorot(1, dims.d_e, &mut rng)),
            FeatureSlot::Categorical { cardinality, .. } => embeddings.push(glorot(cardinality, dims.d_e, &mut rng)),
        }
    }
    let width = schema.m() * dims.d_e;
    let mlp = vec![
        Linear::glorot(width, dims.h1, &mut rng),
        Linear::glorot(dims.h1, dims.h2, &mut rng),
    ];
    let semantic = SemanticAdapterParams {
        linear: Linear::glorot(d_plm, dims.h2, &mut stream(1)),
    };
    let head_tab = head(dims, &mut stream(2));
    let head_txt = head(dims, &mut stream(3));
    let centroids = random_unit_rows(schema.k_star, dims.d, &mut stream(4));
    Ok(ModelParams {
        dims: *dims,
        d_plm,
        seed,
        schema_fingerprint: schema.fingerprint(),
        tabular: TabularEncoderParams {
            numeric,
            embeddings,
            mlp,
        },
        semantic,
        head_tab,
        head_txt,
        centroids,
    })
}

fn random_unit_rows(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
    loop {
        let t = glorot(rows, cols, rng);
        if let Ok(u) = t.l2_normalize_rows() {
            return u;
        }
    }
}

/// `k` random unit-norm rows; used as an uninformed reference for centroids.
pub fn random_centroids(k: usize, d: usize, seed: u64) -> Tensor {
    random_unit_rows(k, d, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// Renormalizes every centroid to unit length.
pub fn renormalize_centroids(centroids: &mut Tensor) -> Result<(), ModelError> {
    *centroids = centroids.l2_normalize_rows()?;
    Ok(())
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// All parameter tensors in binding order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.tabular.numeric {
            out.extend([&l.w, &l.b]);
        }
        out.extend(self.tabular.embeddings.iter());
        for l in self.tabular.mlp.iter().chain([&self.semantic.linear]) {
            out.extend([&l.w, &l.b]);
        }
        for l in self.head_tab.layers.iter().chain(&self.head_txt.layers) {
            out.extend([&l.w, &l.b]);
        }
        out.push(&self.centroids);
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.tabular.numeric {
            out.extend([&mut l.w, &mut l.b]);
        }
        out.extend(self.tabular.embeddings.iter_mut());
        for l in self.tabular.mlp.iter_mut().chain([&mut self.semantic.linear]) {
            out.extend([&mut l.w, &mut l.b]);
        }
        for l in self.head_tab.layers.iter_mut().chain(&mut self.head_txt.layers) {
            out.extend([&mut l.w, &mut l.b]);
        }
        out.push(&mut self.centroids);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let bind_linear = |l: &Linear, tape: &mut Tape| BoundLinear {
            w: tape.param(l.w.clone()),
            b: tape.param(l.b.clone()),
        };
        let numeric = self.tabular.numeric.iter().map(|l| bind_linear(l, tape)).collect();
        let embeddings = self.tabular.embeddings.iter().map(|e| tape.param(e.clone())).collect();
        let mlp = self.tabular.mlp.iter().map(|l| bind_linear(l, tape)).collect();
        let semantic = bind_linear(&self.semantic.linear, tape);
        let head_tab = self.head_tab.layers.iter().map(|l| bind_linear(l, tape)).collect();
        let head_txt = self.head_txt.layers.iter().map(|l| bind_linear(l, tape)).collect();
        let centroids = tape.param(self.centroids.clone());
        BoundModel {
            numeric,
            embeddings,
            mlp,
            semantic,
            head_tab,
            head_txt,
            centroids,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub numeric: Vec<BoundLinear>,
    pub embeddings: Vec<Var>,
    pub mlp: Vec<BoundLinear>,
    pub semantic: BoundLinear,
    pub head_tab: Vec<BoundLinear>,
    pub head_txt: Vec<BoundLinear>,
    pub centroids: Var,
}

impl BoundModel {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.numeric {
            out.extend([l.w, l.b]);
        }
        out.extend(self.embeddings.iter().copied());
        for l in self.mlp.iter().chain([&self.semantic]) {
            out.extend([l.w, l.b]);
        }
        for l in self.head_tab.iter().chain(&self.head_txt) {
            out.extend([l.w, l.b]);
        }
        out.push(self.centroids);
        out
    }
}

fn linear(tape: &mut Tape, x: Var, l: BoundLinear) -> Result<Var, ModelError> {
    let xw = tape.matmul(x, l.w)?;
    Ok(tape.add_row(xw, l.b)?)
}

fn mlp(tape: &mut Tape, mut x: Var, layers: &[BoundLinear]) -> Result<Var, ModelError> {
    for (i, &l) in layers.iter().enumerate() {
        if i > 0 {
            x = tape.relu(x);
        }
        x = linear(tape, x, l)?;
    }
    Ok(x)
}

/// Per-feature embeddings concatenated in schema order, then the fusion MLP.
pub fn encode_tabular(
    tape: &mut Tape,
    model: &BoundModel,
    layout: &[FeatureSlot],
    batch: &TabularBatch,
) -> Result<Var, ModelError> {
    let rows = batch.len();
    if batch.numeric.cols() != model.numeric.len() || batch.categorical.len() != model.embeddings.len() {
        return Err(ModelError::Layout(format!(
            "batch has {} numeric and {} categorical columns, model expects {} and {}",
            batch.numeric.cols(),
            batch.categorical.len(),
            model.numeric.len(),
            model.embeddings.len()
        )));
    }
    let mut parts = Vec::with_capacity(layout.len());
    for slot in layout {
        let part = match *slot {
            FeatureSlot::Numeric(col) => {
                let values = (0..rows).map(|i| batch.numeric.get(i, col)).collect();
                let x = tape.constant(Tensor::matrix(rows, 1, values)?);
                linear(tape, x, model.numeric[col])?
            }
            FeatureSlot::Categorical { column, .. } => tape.gather_rows(model.embeddings[column], &batch.categorical[column])?,
        };
        parts.push(part);
    }
    let h = tape.concat_cols(&parts)?;
    mlp(tape, h, &model.mlp)
}

/// Affine adapter over frozen sentence embeddings.
pub fn adapt_semantic(tape: &mut Tape, model: &BoundModel, embeddings: Var) -> Result<Var, ModelError> {
    let expected = tape.value(model.semantic.w).rows();
    let got = tape.value(embeddings).cols();
    if got != expected {
        return Err(ModelError::Layout(format!("embedding dim {got}, adapter expects {expected}")));
    }
    linear(tape, embeddings, model.semantic)
}

/// Projection head followed by row normalization onto the unit sphere.
pub fn project(tape: &mut Tape, model: &BoundModel, which: Branch, x: Var) -> Result<Var, ModelError> {
    let layers = match which {
        Branch::Tab => &model.head_tab,
        Branch::Txt => &model.head_txt,
    };
    let y = mlp(tape, x, layers)?;
    Ok(tape.l2_normalize_rows(y)?)
}

/// Spherical k-means with k-means++ seeding; centroids are unit rows.
pub fn init_centroids(z: &Tensor, k: usize, seed: u64) -> Result<Tensor, ModelError> {
    if z.rows() < k || k == 0 {
        return Err(ModelError::TooFewRows { n: z.rows(), k });
    }
    let result = kmeans(
        z,
        k,
        &KMeansOptions {
            geometry: Geometry::Spherical,
            n_init: 10,
            max_iter: 100,
            seed,
        },
    );
    Ok(result.centroids.l2_normalize_rows()?)
}
