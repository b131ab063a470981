//! The end-to-end training loop on the synthetic task.
//!
//! The whole dataset is materialized once as constant matrices; every
//! forward pass is a handful of batched tensor ops, so graphs stay shallow
//! regardless of dataset size. Query features fed to the weight generators
//! are detached: weights act as data-dependent coefficients and carry no
//! gradient back to the model parameters.

use super::{Mode, Order, Result, RoundRecord, TrainConfig, TrainError, TrainState};
use crate::metrics::{self, Answer, EvalReport, EvalSample, Predictions};
use crate::models::{
    forward_from_features, mwn_forward, predict_probs, BatchInputs, CompositionModel, MetaWeightNet,
    ModelConfig,
};
use crate::partition::{assign_buckets, count_by_length, ValidationPartition};
use crate::synth::Sample;
use crate::tensor::{self, bce, dot, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// The training set as constant tensors plus the bucket structure.
pub struct PreparedData {
    pub inputs: BatchInputs,
    /// Dataset row indices per bucket (dataset order within each bucket).
    pub bucket_rows: Vec<Arc<Vec<usize>>>,
    /// Bucket index per dataset row.
    pub sample_bucket: Vec<usize>,
}

/// Builds the constant tensors and bucket index lists for a training set.
pub fn prepare(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    partition: &ValidationPartition,
) -> Result<PreparedData> {
    let inputs = BatchInputs::build(samples, model_cfg)?;
    let bucket_rows: Vec<Arc<Vec<usize>>> = partition
        .buckets
        .iter()
        .map(|b| Arc::new(b.indices.clone()))
        .collect();
    let sample_bucket = partition.bucket_of_sample();
    if sample_bucket.iter().any(|&b| b == usize::MAX) || sample_bucket.len() != samples.len() {
        return Err(TrainError::Data("sample with no bucket assignment".into()));
    }
    Ok(PreparedData { inputs, bucket_rows, sample_bucket })
}

/// A (possibly mini-batched) view of the prepared data: the constant input
/// slices plus batch-local bucket row lists.
struct View {
    slot1: Tensor,
    slot2: Tensor,
    scene: Tensor,
    labels: Tensor,
    bucket_rows: Vec<Arc<Vec<usize>>>,
}

impl View {
    fn full(data: &PreparedData) -> View {
        View {
            slot1: data.inputs.slot1.clone(),
            slot2: data.inputs.slot2.clone(),
            scene: data.inputs.scene.clone(),
            labels: data.inputs.labels.clone(),
            bucket_rows: data.bucket_rows.clone(),
        }
    }

    fn batch(data: &PreparedData, rows: &Arc<Vec<usize>>, k: usize) -> tensor::Result<View> {
        let mut bucket_rows: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (local, &global) in rows.iter().enumerate() {
            bucket_rows[data.sample_bucket[global]].push(local);
        }
        Ok(View {
            slot1: data.inputs.slot1.gather_rows(rows)?,
            slot2: data.inputs.slot2.gather_rows(rows)?,
            scene: data.inputs.scene.gather_rows(rows)?,
            labels: data.inputs.labels.gather_rows(rows)?,
            bucket_rows: bucket_rows.into_iter().map(Arc::new).collect(),
        })
    }

    /// Restriction to one bucket's rows (used for validation losses).
    fn bucket(data: &PreparedData, i: usize) -> tensor::Result<View> {
        let rows = &data.bucket_rows[i];
        Ok(View {
            slot1: data.inputs.slot1.gather_rows(rows)?,
            slot2: data.inputs.slot2.gather_rows(rows)?,
            scene: data.inputs.scene.gather_rows(rows)?,
            labels: data.inputs.labels.gather_rows(rows)?,
            bucket_rows: Vec::new(),
        })
    }

    fn query_features(&self, theta: &ParamSet) -> tensor::Result<Tensor> {
        let embed = theta.get("embed").expect("theta has embed table");
        tensor::concat_cols(&[self.slot1.matmul(embed)?, self.slot2.matmul(embed)?])
    }

    /// Per-sample losses `[n, 1]` under `theta`.
    fn sample_losses(&self, theta: &ParamSet) -> tensor::Result<Tensor> {
        let feats = self.query_features(theta)?;
        let probs = forward_from_features(theta, &feats, &self.scene)?;
        bce(&probs, &self.labels)
    }

    /// The training loss: per-bucket weighted sums of per-sample losses, or
    /// the plain (dataset-order) sum when `weighted` is off.
    fn train_loss(
        &self,
        theta: &ParamSet,
        omegas: &[ParamSet],
        weighted: bool,
        normalize: bool,
    ) -> tensor::Result<Tensor> {
        let feats = self.query_features(theta)?;
        let probs = forward_from_features(theta, &feats, &self.scene)?;
        let losses = bce(&probs, &self.labels)?;
        if !weighted {
            return losses.sum_all();
        }
        // stop-gradient: the generators see features, not their θ-lineage
        let detached = feats.detach();
        let mut total = Tensor::scalar(0.0)?;
        for (i, rows) in self.bucket_rows.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let w = mwn_forward(&omegas[i], &detached.gather_rows(rows)?)?;
            let w = if normalize { w.div(&w.mean_all()?)? } else { w };
            total = total.add(&dot(&w, &losses.gather_rows(rows)?)?)?;
        }
        Ok(total)
    }
}

/// Everything a finished run hands back.
pub struct RunResult {
    pub model: CompositionModel,
    pub nets: Vec<MetaWeightNet>,
    pub state: TrainState,
    pub partition: ValidationPartition,
    pub stopped_early: bool,
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Batcher {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7221),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> Arc<Vec<usize>> {
        let mut rows = Vec::with_capacity(self.batch);
        while rows.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        Arc::new(rows)
    }
}

/// Mean unweighted loss per bucket at `theta` (NaN-free; empty buckets get
/// `f64::NAN` markers filtered by the caller).
fn bucket_val_means(theta: &ParamSet, data: &PreparedData) -> Result<Vec<f64>> {
    let theta = theta.detach_all();
    let mut out = Vec::with_capacity(data.bucket_rows.len());
    for (i, rows) in data.bucket_rows.iter().enumerate() {
        if rows.is_empty() {
            out.push(f64::NAN);
            continue;
        }
        let view = View::bucket(data, i)?;
        out.push(view.sample_losses(&theta)?.mean_all()?.item()?);
    }
    Ok(out)
}

/// Mean generated sample weight per bucket under the current generators.
fn bucket_mean_weights(theta: &ParamSet, omegas: &[ParamSet], data: &PreparedData) -> Result<Vec<f64>> {
    let theta = theta.detach_all();
    let view = View::full(data);
    let feats = view.query_features(&theta)?.detach();
    let mut out = Vec::with_capacity(data.bucket_rows.len());
    for (i, rows) in data.bucket_rows.iter().enumerate() {
        if rows.is_empty() {
            out.push(f64::NAN);
            continue;
        }
        let w = mwn_forward(&omegas[i].detach_all(), &feats.gather_rows(rows)?)?;
        out.push(w.mean_all()?.item()?);
    }
    Ok(out)
}

/// One meta phase: updates the generators in the configured order and
/// returns the update trace (1-based bucket indices).
fn meta_phase(
    theta_star: &ParamSet,
    omegas: &mut [ParamSet],
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<Vec<usize>> {
    let k = omegas.len();
    let mut trace = Vec::new();

    let update = |i: usize, omegas: &mut [ParamSet], trace: &mut Vec<usize>| -> Result<()> {
        if data.bucket_rows[i].is_empty() {
            return Ok(());
        }
        let frozen: Vec<ParamSet> = omegas.iter().map(ParamSet::detach_all).collect();
        let view = View::full(data);
        let val_view = View::bucket(data, i)?;
        let normalize = cfg.normalize_weights;
        let train = |th: &ParamSet, om: &ParamSet| {
            let mut sets = frozen.clone();
            sets[i] = om.clone();
            view.train_loss(th, &sets, true, normalize)
        };
        let val = |th: &ParamSet| val_view.sample_losses(th)?.sum_all();
        let grad = super::engine::hypergradient(
            &train,
            &val,
            theta_star,
            &omegas[i],
            cfg.neumann_alpha,
            cfg.neumann_j,
        )?;
        omegas[i] = omegas[i].add_scaled(&grad, -cfg.lr_omega)?;
        trace.push(i + 1);
        Ok(())
    };

    match cfg.mode {
        Mode::Baseline => {}
        Mode::Mlo => {
            let order: Vec<usize> = match cfg.order {
                Order::S2c => (0..k).collect(),
                Order::C2s => (0..k).rev().collect(),
            };
            for i in order {
                for _ in 0..cfg.t_m {
                    update(i, omegas, &mut trace)?;
                }
            }
        }
        Mode::MwnSimultaneous => {
            // all generators step from the same snapshot each sweep
            for _ in 0..cfg.t_m {
                let snapshot: Vec<ParamSet> = omegas.iter().map(ParamSet::detach_all).collect();
                let mut stepped: Vec<ParamSet> = omegas.to_vec();
                for i in 0..k {
                    if data.bucket_rows[i].is_empty() {
                        continue;
                    }
                    let view = View::full(data);
                    let val_view = View::bucket(data, i)?;
                    let snap = snapshot.clone();
                    let normalize = cfg.normalize_weights;
                    let train = move |th: &ParamSet, om: &ParamSet| {
                        let mut sets = snap.clone();
                        sets[i] = om.clone();
                        view.train_loss(th, &sets, true, normalize)
                    };
                    let val = |th: &ParamSet| val_view.sample_losses(th)?.sum_all();
                    let grad = super::engine::hypergradient(
                        &train,
                        &val,
                        theta_star,
                        &snapshot[i],
                        cfg.neumann_alpha,
                        cfg.neumann_j,
                    )?;
                    stepped[i] = snapshot[i].add_scaled(&grad, -cfg.lr_omega)?;
                    trace.push(i + 1);
                }
                omegas.clone_from_slice(&stepped);
            }
        }
    }
    Ok(trace)
}

/// Trains on `train_samples` under `cfg`, alternating parameter and meta
/// phases until the round cap or early stop. The returned model carries only
/// the task parameters; the generators ride along for persistence but play
/// no part in inference.
pub fn run(model_cfg: ModelConfig, cfg: &TrainConfig, train_samples: &[Sample]) -> Result<RunResult> {
    cfg.validate()?;
    let profile = count_by_length(train_samples)?;
    let partition = assign_buckets(&profile, cfg.k)?;
    let data = prepare(train_samples, &model_cfg, &partition)?;

    let mut theta = CompositionModel::init(model_cfg, cfg.seed).params;
    let mut omegas: Vec<ParamSet> = (0..cfg.k)
        .map(|i| MetaWeightNet::init(&model_cfg, cfg.seed.wrapping_add(1 + i as u64)).params)
        .collect();
    let param_count = theta.param_count();
    let weighted = cfg.mode != Mode::Baseline;

    let mut batcher = cfg
        .batch_size
        .map(|b| Batcher::new(train_samples.len(), b.min(train_samples.len()), cfg.seed));

    let mut history: Vec<RoundRecord> = Vec::new();
    let mut full_trace: Vec<usize> = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut rounds_completed = 0usize;

    for round in 0..cfg.rounds {
        // parameter optimization: generators frozen for the whole phase
        let frozen: Vec<ParamSet> = omegas.iter().map(ParamSet::detach_all).collect();
        theta = match &mut batcher {
            None => {
                let view = View::full(&data);
                super::engine::parameter_optimization(
                    |th| view.train_loss(th, &frozen, weighted, cfg.normalize_weights),
                    &theta,
                    cfg.t_p,
                    cfg.lr_theta,
                )?
            }
            Some(b) => {
                let mut th = theta;
                for _ in 0..cfg.t_p {
                    let rows = b.next();
                    let view = View::batch(&data, &rows, cfg.k)?;
                    th = super::engine::parameter_optimization(
                        |t| view.train_loss(t, &frozen, weighted, cfg.normalize_weights),
                        &th,
                        1,
                        cfg.lr_theta,
                    )?;
                }
                th
            }
        };
        debug_assert_eq!(theta.param_count(), param_count);

        let bucket_val_loss = bucket_val_means(&theta, &data)?;
        let mean_weight = bucket_mean_weights(&theta, &omegas, &data)?;
        let trace = meta_phase(&theta, &mut omegas, &data, cfg)?;
        full_trace.extend_from_slice(&trace);
        history.push(RoundRecord { round, bucket_val_loss: bucket_val_loss.clone(), mean_weight, trace });
        rounds_completed = round + 1;

        let finite: Vec<f64> = bucket_val_loss.iter().copied().filter(|v| v.is_finite()).collect();
        let mean_val = finite.iter().sum::<f64>() / finite.len() as f64;
        if mean_val < best {
            best = mean_val;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(RunResult {
        model: CompositionModel { config: model_cfg, params: theta.clone() },
        nets: omegas.iter().map(|p| MetaWeightNet { params: p.clone() }).collect(),
        state: TrainState { theta, omegas, rounds_completed, history, full_trace },
        partition,
        stopped_early,
    })
}

/// Scores a trained model on the triplet test set (and optionally an IID
/// held-out split) with threshold-0.5 predictions.
pub fn evaluate_run(
    model: &CompositionModel,
    test: &[Sample],
    iid: Option<&[Sample]>,
) -> Result<EvalReport> {
    let probs = predict_probs(model, test)?;
    let preds: Predictions = test
        .iter()
        .zip(&probs)
        .map(|(s, &p)| (s.id.clone(), Answer::Bool(p >= 0.5)))
        .collect();
    let eval_samples: Vec<EvalSample> = test.iter().map(EvalSample::from).collect();
    let mut report = metrics::evaluate(&preds, &eval_samples)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    if let Some(iid_samples) = iid {
        let probs = predict_probs(model, iid_samples)?;
        let correct = iid_samples
            .iter()
            .zip(&probs)
            .filter(|(s, &p)| (p >= 0.5) == s.answer)
            .count();
        report.iid_accuracy = Some(correct as f64 / iid_samples.len() as f64);
    }
    Ok(report)
}
