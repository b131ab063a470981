//! The desk-scale task model and the per-bucket weight generators.
//!
//! The task model scores "does this query hold in this scene": each of the
//! two descriptor slots is encoded as the arithmetic mean of its item
//! embeddings (zeros for an absent second slot), the scene as a fixed binary
//! presence vector over items and same-object item pairs, and a two-layer
//! perceptron with a sigmoid head maps the concatenation to a probability.
//!
//! A weight generator is three stacked fully connected layers with ReLU
//! between them and a sigmoid head, mapping a query feature to a sample
//! weight in (0, 1). The generators for different buckets share this
//! architecture but never share parameters.

use crate::synth::{Descriptor, Sample, Scene};
use crate::tensor::{concat_cols, ParamSet, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown vocabulary item {id} (vocabulary has {total})")]
    UnknownItem { id: usize, total: usize },
    #[error("malformed scene: {0}")]
    MalformedScene(String),
    #[error("bucket index {index} out of range 1..={count}")]
    BucketIndex { index: usize, count: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters. The vocabulary counts are copied from the
/// world so the scene feature layout is self-contained.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_sizes: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// Item embedding width.
    pub d_emb: usize,
    /// Classifier hidden width.
    pub hidden: usize,
    /// Weight-generator hidden width.
    pub mwn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_sizes: 3,
            n_colors: 6,
            n_shapes: 6,
            d_emb: 16,
            hidden: 64,
            mwn_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_sizes + self.n_colors + self.n_shapes
    }

    /// Query feature width: two descriptor slots of `d_emb` each.
    pub fn feature_dim(&self) -> usize {
        2 * self.d_emb
    }

    /// Item presence plus same-object pair presence.
    pub fn scene_dim(&self) -> usize {
        self.vocab_size()
            + self.n_sizes * self.n_colors
            + self.n_sizes * self.n_shapes
            + self.n_colors * self.n_shapes
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim() + self.scene_dim()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_data(rows, cols, data)
}

// Construction helper kept off the public Tensor surface.
trait FromData {
    fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Tensor;
}
impl FromData for Tensor {
    fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(rows, cols, data).expect("init data is finite and sized")
    }
}

/// The task model: embedding table plus a two-layer classifier head.
#[derive(Clone, Debug)]
pub struct CompositionModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl CompositionModel {
    pub fn init(config: ModelConfig, seed: u64) -> CompositionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.insert("embed", uniform_init(&mut rng, config.vocab_size(), config.d_emb, config.d_emb));
        params.insert("w1", uniform_init(&mut rng, config.input_dim(), config.hidden, config.input_dim()));
        params.insert("b1", Tensor::zeros(1, config.hidden));
        params.insert("w2", uniform_init(&mut rng, config.hidden, 1, config.hidden));
        params.insert("b2", Tensor::zeros(1, 1));
        CompositionModel { config, params }
    }
}

/// One weight generator: `2·d_emb -> m -> m -> 1` with a sigmoid head.
#[derive(Clone, Debug)]
pub struct MetaWeightNet {
    pub params: ParamSet,
}

impl MetaWeightNet {
    pub fn init(config: &ModelConfig, seed: u64) -> MetaWeightNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, m) = (config.feature_dim(), config.mwn_hidden);
        let mut params = ParamSet::new();
        params.insert("w1", uniform_init(&mut rng, f, m, f));
        params.insert("b1", Tensor::zeros(1, m));
        params.insert("w2", uniform_init(&mut rng, m, m, m));
        params.insert("b2", Tensor::zeros(1, m));
        params.insert("w3", uniform_init(&mut rng, m, 1, m));
        params.insert("b3", Tensor::zeros(1, 1));
        MetaWeightNet { params }
    }
}

fn check_item(id: usize, total: usize) -> Result<()> {
    if id >= total {
        return Err(ModelError::UnknownItem { id, total });
    }
    Ok(())
}

/// Per-slot averaging weights over the vocabulary for one query:
/// two rows of `[1, vocab]`, each averaging the slot's item embeddings
/// (all-zero second row when the query has a single descriptor).
fn slot_weights(query: &[Descriptor], config: &ModelConfig) -> Result<[Vec<f64>; 2]> {
    let v = config.vocab_size();
    let mut rows = [vec![0.0; v], vec![0.0; v]];
    for (slot, d) in query.iter().take(2).enumerate() {
        let len = d.len();
        for id in d.items() {
            check_item(id, v)?;
            rows[slot][id] += 1.0 / len as f64;
        }
    }
    Ok(rows)
}

/// Query feature for one sample: per-slot mean item embeddings,
/// concatenated. Gradients flow into the embedding table when it is
/// connected.
pub fn encode_query_with(query: &[Descriptor], embed: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let mut slots = Vec::with_capacity(2);
    for d in query.iter().take(2) {
        let ids: Vec<usize> = d.items().collect();
        for &id in &ids {
            check_item(id, config.vocab_size())?;
        }
        let idx = Arc::new(ids);
        let mean = embed.gather_rows(&idx)?.sum_rows()?.scale(1.0 / idx.len() as f64)?;
        slots.push(mean);
    }
    while slots.len() < 2 {
        slots.push(Tensor::zeros(1, config.d_emb));
    }
    Ok(concat_cols(&slots)?)
}

/// Query feature of a sample under a model (see [`encode_query_with`]).
pub fn encode_query(sample: &Sample, model: &CompositionModel) -> Result<Tensor> {
    let embed = model.params.get("embed").expect("model has embed table");
    encode_query_with(&sample.query, embed, &model.config)
}

/// Fixed binary scene encoding: item presence followed by same-object
/// (size,color), (size,shape), (color,shape) pair presence.
pub fn scene_features(scene: &Scene, config: &ModelConfig) -> Result<Vec<f64>> {
    if scene.is_empty() {
        return Err(ModelError::MalformedScene("empty scene".into()));
    }
    let (s, c, sh) = (config.n_sizes, config.n_colors, config.n_shapes);
    let v = config.vocab_size();
    let mut out = vec![0.0; config.scene_dim()];
    for obj in scene {
        let (si, ci, shi) = (obj.size, obj.color, obj.shape);
        if si >= s || ci < s || ci >= s + c || shi < s + c || shi >= v {
            return Err(ModelError::MalformedScene(format!(
                "object ({si},{ci},{shi}) outside vocabulary layout"
            )));
        }
        let (cl, sl) = (ci - s, shi - s - c);
        out[si] = 1.0;
        out[ci] = 1.0;
        out[shi] = 1.0;
        out[v + si * c + cl] = 1.0;
        out[v + s * c + si * sh + sl] = 1.0;
        out[v + s * c + s * sh + cl * sh + sl] = 1.0;
    }
    Ok(out)
}

/// Constant per-dataset matrices for batched forward passes.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// `[n, vocab]` first-slot averaging weights.
    pub slot1: Tensor,
    /// `[n, vocab]` second-slot averaging weights.
    pub slot2: Tensor,
    /// `[n, scene_dim]` scene encodings.
    pub scene: Tensor,
    /// `[n, 1]` ground-truth answers as 0/1.
    pub labels: Tensor,
}

impl BatchInputs {
    pub fn build(samples: &[Sample], config: &ModelConfig) -> Result<BatchInputs> {
        let n = samples.len();
        let v = config.vocab_size();
        let mut s1 = Vec::with_capacity(n * v);
        let mut s2 = Vec::with_capacity(n * v);
        let mut scenes = Vec::with_capacity(n * config.scene_dim());
        let mut labels = Vec::with_capacity(n);
        for sample in samples {
            let [r1, r2] = slot_weights(&sample.query, config)?;
            s1.extend_from_slice(&r1);
            s2.extend_from_slice(&r2);
            scenes.extend_from_slice(&scene_features(&sample.scene, config)?);
            labels.push(if sample.answer { 1.0 } else { 0.0 });
        }
        Ok(BatchInputs {
            slot1: Tensor::new(n, v, s1).map_err(ModelError::Tensor)?,
            slot2: Tensor::new(n, v, s2).map_err(ModelError::Tensor)?,
            scene: Tensor::new(n, config.scene_dim(), scenes).map_err(ModelError::Tensor)?,
            labels: Tensor::new(n, 1, labels).map_err(ModelError::Tensor)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[n, 2·d_emb]` query features under the given parameters; connected
    /// to the embedding table when it is.
    pub fn query_features(&self, params: &ParamSet) -> crate::tensor::Result<Tensor> {
        let embed = params.get("embed").expect("params have embed table");
        concat_cols(&[self.slot1.matmul(embed)?, self.slot2.matmul(embed)?])
    }
}

/// Classifier head over prepared features: `[n, 1]` probabilities in (0, 1).
pub fn forward_from_features(
    params: &ParamSet,
    query_feat: &Tensor,
    scene: &Tensor,
) -> crate::tensor::Result<Tensor> {
    let x = concat_cols(&[query_feat.clone(), scene.clone()])?;
    let h = x
        .matmul(params.get("w1").expect("w1"))?
        .add(params.get("b1").expect("b1"))?
        .relu()?;
    let logits = h
        .matmul(params.get("w2").expect("w2"))?
        .add(params.get("b2").expect("b2"))?;
    logits.sigmoid()
}

/// Probability that the answer to `sample` is "yes".
pub fn model_forward(sample: &Sample, model: &CompositionModel) -> Result<f64> {
    let feat = encode_query(sample, model)?;
    let scene = Tensor::new(1, model.config.scene_dim(), scene_features(&sample.scene, &model.config)?)
        .map_err(ModelError::Tensor)?;
    let p = forward_from_features(&model.params, &feat, &scene)?;
    Ok(p.item()?)
}

/// Batched probabilities under constant (unrecorded) parameters.
pub fn predict_probs(model: &CompositionModel, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = BatchInputs::build(samples, &model.config)?;
    let params = model.params.detach_all();
    let feat = inputs.query_features(&params)?;
    let p = forward_from_features(&params, &feat, &inputs.scene)?;
    Ok(p.data().to_vec())
}

/// Weight-generator forward pass: `[n, 2·d_emb]` features to `[n, 1]`
/// weights in (0, 1). A pure function of the parameters and features.
pub fn mwn_forward(params: &ParamSet, features: &Tensor) -> crate::tensor::Result<Tensor> {
    let h1 = features
        .matmul(params.get("w1").expect("w1"))?
        .add(params.get("b1").expect("b1"))?
        .relu()?;
    let h2 = h1
        .matmul(params.get("w2").expect("w2"))?
        .add(params.get("b2").expect("b2"))?
        .relu()?;
    let out = h2
        .matmul(params.get("w3").expect("w3"))?
        .add(params.get("b3").expect("b3"))?;
    out.sigmoid()
}

/// Sample weight from the `i`-th generator (1-based): exactly `nets[i-1]`
/// is used.
pub fn weight_forward(i: usize, features: &Tensor, nets: &[MetaWeightNet]) -> Result<Tensor> {
    if i == 0 || i > nets.len() {
        return Err(ModelError::BucketIndex { index: i, count: nets.len() });
    }
    Ok(mwn_forward(&nets[i - 1].params, features)?)
}

/// Binary cross-entropy of the model's prediction against the answer.
pub fn sample_loss(sample: &Sample, model: &CompositionModel) -> Result<Tensor> {
    let feat = encode_query(sample, model)?;
    let scene = Tensor::new(1, model.config.scene_dim(), scene_features(&sample.scene, &model.config)?)
        .map_err(ModelError::Tensor)?;
    let p = forward_from_features(&model.params, &feat, &scene)?;
    let y = Tensor::scalar(if sample.answer { 1.0 } else { 0.0 }).map_err(ModelError::Tensor)?;
    Ok(crate::tensor::bce(&p, &y)?)
}

/// On-disk model document: `{"config": {...}, "params": ..., "meta_nets": [...]}`.
/// `config.train` is opaque provenance (the effective run configuration).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub config: ModelFileConfig,
    pub params: ParamSet,
    pub meta_nets: Vec<ParamSet>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelFileConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

impl ModelFile {
    pub fn new(model: &CompositionModel, nets: &[MetaWeightNet], train: Option<serde_json::Value>) -> ModelFile {
        ModelFile {
            config: ModelFileConfig { model: model.config, train },
            params: model.params.clone(),
            meta_nets: nets.iter().map(|n| n.params.clone()).collect(),
        }
    }

    pub fn model(&self) -> CompositionModel {
        CompositionModel {
            config: self.config.model,
            params: self.params.clone(),
        }
    }

    pub fn nets(&self) -> Vec<MetaWeightNet> {
        self.meta_nets.iter().map(|p| MetaWeightNet { params: p.clone() }).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        let r = BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}
