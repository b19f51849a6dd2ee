//! Training loop for the two unary fields: batch sampling, the combined
//! energy and isometry loss, annealing schedules, checkpoints and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::energy::{bidirectional_energy_loss, frozen_energy_loss, match_sides, EnergyConfig, MatchSet, MatchSide};
use crate::error::{Error, Result};
use crate::field::{FieldGrads, UnaryField};
use crate::geometry::Vec3;
use crate::isometry::{edge_isometry_loss, edge_isometry_losses, EdgeSet, NeighborGraph, DEFAULT_K};
use crate::nn::{make_dropout_mask, Activation, AdamState, Mode};
use crate::pointset::{Feature, FeaturedPointCloud, NormStats, PcaBasis, REDUCED_DIM};

pub const CHECKPOINT_FORMAT: &str = "gmc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Iteration whose total loss anchors the divergence guard.
const GUARD_REFERENCE_ITER: usize = 100;
const GUARD_FACTOR: f64 = 10.0;
const GUARD_WINDOW: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub alpha_end: f64,
    pub alpha_ramp_iters: usize,
    /// Position-input dropout ratio.
    pub dropout: f64,
    /// Multiplier on normalized positions.
    pub position_weight: f64,
    pub energy: EnergyConfig,
    /// Fraction of training over which the Gumbel scale decays to zero.
    pub gumbel_decay_fraction: f64,
    pub iso_k: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Iterations between spread samples and checkpoint writes.
    pub checkpoint_every: usize,
    /// Fit PCA on both clouds instead of the start cloud alone.
    pub joint_pca: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            lr: 5e-4,
            alpha_end: 10.0,
            alpha_ramp_iters: 10_000,
            dropout: 0.1,
            position_weight: 1.0,
            energy: EnergyConfig::default(),
            gumbel_decay_fraction: 0.5,
            iso_k: DEFAULT_K,
            hidden: vec![64, 64, 64],
            activation: Activation::Relu,
            seed: 0,
            checkpoint_every: 1000,
            joint_pca: false,
        }
    }
}

impl TrainConfig {
    /// The low position setting: weight 0.1 paired with dropout 0.2. Suits
    /// scenes whose parts have uniform features, where strong position
    /// matching folds a part before the isometry term has ramped up.
    pub fn weak_positions(self) -> TrainConfig {
        TrainConfig {
            position_weight: 0.1,
            dropout: 0.2,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.iso_k == 0 || self.checkpoint_every == 0 {
            return bad("iterations, iso_k and checkpoint_every must be positive".into());
        }
        if self.alpha_ramp_iters > self.iterations {
            return bad(format!(
                "alpha_ramp_iters ({}) exceeds iterations ({})",
                self.alpha_ramp_iters, self.iterations
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha_end.is_finite() && self.alpha_end >= 0.0) {
            return bad(format!("alpha_end must be nonnegative, got {}", self.alpha_end));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.position_weight.is_finite() && self.position_weight > 0.0) {
            return bad(format!("position_weight must be positive, got {}", self.position_weight));
        }
        if !(self.gumbel_decay_fraction.is_finite() && self.gumbel_decay_fraction > 0.0) {
            return bad("gumbel_decay_fraction must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("invalid hidden sizes {:?}", self.hidden));
        }
        Ok(())
    }

    /// `alpha_end * min(1, iter / alpha_ramp_iters)`.
    pub fn alpha_at(&self, iter: usize) -> f64 {
        if self.alpha_ramp_iters == 0 {
            return self.alpha_end;
        }
        self.alpha_end * (iter as f64 / self.alpha_ramp_iters as f64).min(1.0)
    }

    /// Gumbel scale decaying linearly to zero.
    pub fn gumbel_at(&self, iter: usize) -> f64 {
        let span = self.gumbel_decay_fraction * self.iterations as f64;
        self.energy.gumbel_scale * (1.0 - iter as f64 / span).max(0.0)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Normalized positions, colors and reduced features of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub features: Vec<Feature>,
}

impl TrainCloud {
    pub fn from_normalized(cloud: &FeaturedPointCloud) -> Result<TrainCloud> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(TrainCloud {
            positions: cloud.positions.clone(),
            colors: cloud.colors.clone(),
            features: cloud.reduced()?.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> TrainCloud {
        TrainCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            features: idx.iter().map(|&i| self.features[i]).collect(),
        }
    }

    fn fingerprint(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for v in self.positions[i].iter().chain(self.colors[i].iter()).chain(self.features[i].iter()) {
                h.update(v.to_le_bytes());
            }
        }
    }
}

/// Both clouds after feature reduction and shared normalization.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub stats: NormStats,
    pub pca: Option<PcaBasis>,
    pub start: FeaturedPointCloud,
    pub end: FeaturedPointCloud,
    pub start_normalized: FeaturedPointCloud,
    pub end_normalized: FeaturedPointCloud,
}

/// Reduces features to 4-D (PCA fitted on the start cloud, or on both with
/// `joint_pca`) and normalizes both clouds with statistics of the start.
///
/// 4-D inputs are used as-is. Inputs with fewer than four feature columns
/// are zero-padded.
pub fn prepare_pair(start: &FeaturedPointCloud, end: &FeaturedPointCloud, position_weight: f64, joint_pca: bool) -> Result<PreparedPair> {
    if start.is_empty() || end.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (fs, fe) = (start.feature_dim(), end.feature_dim());
    if fs != fe {
        return Err(Error::shape(format!("{fs} feature columns in both clouds"), fe));
    }
    let mut start = start.clone();
    let mut end = end.clone();
    let mut pca = None;
    if start.reduced_features.is_none() || end.reduced_features.is_none() {
        if fs == REDUCED_DIM {
            start.adopt_raw_features_if_reduced();
            end.adopt_raw_features_if_reduced();
        } else if fs < REDUCED_DIM {
            log::warn!("only {fs} feature columns; zero-padding to {REDUCED_DIM}");
            let pad = |c: &FeaturedPointCloud| -> Vec<Feature> {
                (0..c.len())
                    .map(|i| std::array::from_fn(|k| if k < fs { c.features[[i, k]] } else { 0.0 }))
                    .collect()
            };
            start.reduced_features = Some(pad(&start));
            end.reduced_features = Some(pad(&end));
        } else {
            let basis = if joint_pca {
                let both = ndarray::concatenate(ndarray::Axis(0), &[start.features.view(), end.features.view()])
                    .map_err(|e| Error::Config(e.to_string()))?;
                PcaBasis::fit(both.view(), REDUCED_DIM)?
            } else {
                PcaBasis::fit(start.features.view(), REDUCED_DIM)?
            };
            let project = |c: &FeaturedPointCloud| -> Result<Vec<Feature>> {
                let r = basis.project(c.features.view())?;
                Ok(r.rows().into_iter().map(|row| std::array::from_fn(|k| row[k])).collect())
            };
            start.reduced_features = Some(project(&start)?);
            end.reduced_features = Some(project(&end)?);
            pca = Some(basis);
        }
    }
    let stats = NormStats::compute(&start, position_weight)?;
    let start_normalized = stats.normalize(&start)?;
    let end_normalized = stats.normalize(&end)?;
    Ok(PreparedPair {
        stats,
        pca,
        start,
        end,
        start_normalized,
        end_normalized,
    })
}

/// One side of a loss evaluation: which points, which graph edges among
/// them (local indices), and the position dropout mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub edges: Arc<EdgeSet>,
    pub position_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub energy: f64,
    /// Sum of both clouds' canonical-map isometry terms.
    pub iso_canonical: f64,
    pub iso_cross: f64,
    pub alpha: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub terms: LossTerms,
    /// Start-batch matches into the end batch (local indices).
    pub forward: MatchSet,
    pub backward: MatchSet,
    pub grads0: FieldGrads,
    pub grads1: FieldGrads,
}

/// Full training loss and its gradients for both fields on one pair of
/// batches.
///
/// With `frozen` the given local match indices replace the search, which
/// makes the loss a smooth function of the parameters for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients<R: Rng + ?Sized>(
    f0: &UnaryField,
    f1: &UnaryField,
    g0: &TrainCloud,
    g1: &TrainCloud,
    b0: &Batch,
    b1: &Batch,
    cfg: &EnergyConfig,
    alpha: f64,
    gumbel_scale: f64,
    frozen: Option<(&[usize], &[usize])>,
    rng: &mut R,
) -> Result<LossEval> {
    if b0.indices.is_empty() || b1.indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s0 = g0.gather(&b0.indices);
    let s1 = g1.gather(&b1.indices);
    let mut p0 = f0.to_canonical(&s0.positions, &s0.features, Mode::Train, b0.position_mask.as_deref())?;
    let mut p1 = f1.to_canonical(&s1.positions, &s1.features, Mode::Train, b1.position_mask.as_deref())?;
    let side0 = MatchSide::new(&s0.colors, &s0.features, &p0.canonical)?;
    let side1 = MatchSide::new(&s1.colors, &s1.features, &p1.canonical)?;
    let el = match frozen {
        Some((fwd, bwd)) => frozen_energy_loss(&side0, &side1, fwd, bwd, cfg)?,
        None => bidirectional_energy_loss(&side0, &side1, cfg, gumbel_scale, rng)?,
    };
    // cloud 0 carried to the end state through its match's inverse field
    let cross: Vec<Vec3> = el
        .forward
        .index
        .iter()
        .enumerate()
        .map(|(i, &j)| p1.matrices[j].transpose() * (p0.canonical[i] - p1.translations[j]))
        .collect();
    let [iso0, isox] = edge_isometry_losses(&b0.edges, [&p0.canonical, &cross])?;
    let iso1 = edge_isometry_loss(&b1.edges, &p1.canonical)?;
    let iso_canonical = iso0.value + iso1.value;
    let total = el.value + alpha * (iso_canonical + isox.value);

    for i in 0..p0.len() {
        let g = el.grad_a[i] + iso0.grad[i] * alpha;
        p0.add_canonical_grad(i, &g);
    }
    for j in 0..p1.len() {
        let g = el.grad_b[j] + iso1.grad[j] * alpha;
        p1.add_canonical_grad(j, &g);
    }
    if alpha != 0.0 {
        for (i, &j) in el.forward.index.iter().enumerate() {
            let h = isox.grad[i] * alpha;
            let r1 = p1.matrices[j];
            let rh = r1 * h;
            p0.add_canonical_grad(i, &rh);
            p1.add_translation_grad(j, &(-rh));
            let v = p0.canonical[i] - p1.translations[j];
            p1.add_rotation_grad(j, &(v * h.transpose()));
        }
    }
    let grads0 = p0.backward(f0)?;
    let grads1 = p1.backward(f1)?;
    Ok(LossEval {
        terms: LossTerms {
            energy: el.value,
            iso_canonical,
            iso_cross: isox.value,
            alpha,
            total,
        },
        forward: el.forward,
        backward: el.backward,
        grads0,
        grads1,
    })
}

/// RMS spread of canonical positions over RMS spread of the inputs, both
/// about the pooled centroid of the two clouds. One for identity fields,
/// zero for total collapse.
pub fn canonical_spread(f0: &UnaryField, f1: &UnaryField, g0: &TrainCloud, g1: &TrainCloud) -> Result<f64> {
    let c0 = f0.to_canonical(&g0.positions, &g0.features, Mode::Eval, None)?.canonical;
    let c1 = f1.to_canonical(&g1.positions, &g1.features, Mode::Eval, None)?.canonical;
    let rms = |pts: &mut dyn Iterator<Item = &Vec3>, n: usize| -> (Vec3, f64) {
        let all: Vec<Vec3> = pts.copied().collect();
        let mean = all.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
        let ms = all.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n as f64;
        (mean, ms.sqrt())
    };
    let n = g0.len() + g1.len();
    let (_, orig) = rms(&mut g0.positions.iter().chain(&g1.positions), n);
    let (_, canon) = rms(&mut c0.iter().chain(&c1), n);
    if orig == 0.0 {
        return Ok(if canon == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(canon / orig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadSample {
    pub iteration: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    /// Mean clean energy of exact start-to-end matches over the full clouds.
    pub mean_matched_energy: f64,
    pub canonical_spread: f64,
}

/// Per-iteration loss series plus end-of-run statistics. Wall time is kept
/// out so identical runs serialize identically.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub energy: Vec<f64>,
    pub iso_canonical: Vec<f64>,
    pub iso_cross: Vec<f64>,
    pub alpha: Vec<f64>,
    pub total: Vec<f64>,
    pub skipped_updates: u64,
    pub spread: Vec<SpreadSample>,
    pub final_stats: Option<FinalStats>,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.total.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,energy,iso_canonical,iso_cross,alpha,total\n");
        for i in 0..self.total.len() {
            s.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                self.energy[i], self.iso_canonical[i], self.iso_cross[i], self.alpha[i], self.total[i]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct GuardState {
    reference: Option<f64>,
    over: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checksum(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checksum("rng seed length".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checksum("rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointPayload {
    config: TrainConfig,
    iteration: usize,
    field0: UnaryField,
    field1: UnaryField,
    adam: Vec<AdamState>,
    rng: RngState,
    report: TrainReport,
    guard: GuardState,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope<'a> {
    format: String,
    version: u32,
    sha256: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

/// Trained fields and the run's report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field0: UnaryField,
    pub field1: UnaryField,
    pub report: TrainReport,
}

/// Owns all mutable training state. Stepping is deterministic given the
/// config seed.
pub struct Trainer {
    cfg: TrainConfig,
    g0: TrainCloud,
    g1: TrainCloud,
    graph0: NeighborGraph,
    graph1: NeighborGraph,
    f0: UnaryField,
    f1: UnaryField,
    adam: [AdamState; 4],
    rng: ChaCha8Rng,
    iteration: usize,
    report: TrainReport,
    guard: GuardState,
    fingerprint: String,
    checkpoint_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
    /// Edge sets of full-cloud batches, built on first use.
    full_edges: [Option<Arc<EdgeSet>>; 2],
}

fn fingerprint(g0: &TrainCloud, g1: &TrainCloud) -> String {
    let mut h = Sha256::new();
    g0.fingerprint(&mut h);
    g1.fingerprint(&mut h);
    hex::encode(h.finalize())
}

impl Trainer {
    /// Fresh trainer on normalized clouds.
    pub fn new(g0: TrainCloud, g1: TrainCloud, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        if g0.is_empty() || g1.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f0 = UnaryField::new(0, &cfg.hidden, cfg.activation, &mut rng)?;
        let f1 = UnaryField::new(1, &cfg.hidden, cfg.activation, &mut rng)?;
        let adam = [
            AdamState::new(f0.rotation.num_params(), cfg.lr),
            AdamState::new(f0.translation.num_params(), cfg.lr),
            AdamState::new(f1.rotation.num_params(), cfg.lr),
            AdamState::new(f1.translation.num_params(), cfg.lr),
        ];
        let graph0 = NeighborGraph::build(&g0.positions, cfg.iso_k)?;
        let graph1 = NeighborGraph::build(&g1.positions, cfg.iso_k)?;
        let report = TrainReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            ..Default::default()
        };
        Ok(Trainer {
            fingerprint: fingerprint(&g0, &g1),
            cfg,
            g0,
            g1,
            graph0,
            graph1,
            f0,
            f1,
            adam,
            rng,
            iteration: 0,
            report,
            guard: GuardState::default(),
            checkpoint_dir: None,
            last_checkpoint: None,
            full_edges: [None, None],
        })
    }

    /// Writes `checkpoint.json` into `dir` at every checkpoint interval.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn fields(&self) -> (&UnaryField, &UnaryField) {
        (&self.f0, &self.f1)
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn clouds(&self) -> (&TrainCloud, &TrainCloud) {
        (&self.g0, &self.g1)
    }

    fn draw_batch(&mut self, n: usize, graph_side: usize) -> Result<Batch> {
        let b = self.cfg.energy.batch_size.min(n);
        let indices = if b >= n {
            (0..n).collect()
        } else {
            sample(&mut self.rng, n, b).into_vec()
        };
        let position_mask = if self.cfg.dropout > 0.0 {
            Some(make_dropout_mask(3 * indices.len(), self.cfg.dropout, &mut self.rng)?)
        } else {
            None
        };
        let edges = if b >= n {
            let cached = &mut self.full_edges[graph_side];
            if cached.is_none() {
                let (graph, cloud) = if graph_side == 0 { (&self.graph0, &self.g0) } else { (&self.graph1, &self.g1) };
                *cached = Some(Arc::new(EdgeSet::new(&cloud.positions, graph.edges())?));
            }
            cached.clone().expect("just filled")
        } else {
            let (graph, cloud) = if graph_side == 0 { (&self.graph0, &self.g0) } else { (&self.graph1, &self.g1) };
            let local: Vec<Vec3> = indices.iter().map(|&i| cloud.positions[i]).collect();
            Arc::new(EdgeSet::new(&local, graph.batch_edges(&indices))?)
        };
        Ok(Batch {
            indices,
            edges,
            position_mask,
        })
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<LossTerms> {
        let it = self.iteration;
        let b0 = self.draw_batch(self.g0.len(), 0)?;
        let b1 = self.draw_batch(self.g1.len(), 1)?;
        let alpha = self.cfg.alpha_at(it);
        let gumbel = self.cfg.gumbel_at(it);
        let eval = loss_and_gradients(
            &self.f0,
            &self.f1,
            &self.g0,
            &self.g1,
            &b0,
            &b1,
            &self.cfg.energy,
            alpha,
            gumbel,
            None,
            &mut self.rng,
        )?;
        let t = eval.terms;
        if !t.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                last_good: self.last_checkpoint.clone(),
            });
        }
        if eval.grads0.is_finite() && eval.grads1.is_finite() {
            let [a, b, c, d] = &mut self.adam;
            self.f0.rotation.adam_step(&eval.grads0.rotation, a)?;
            self.f0.translation.adam_step(&eval.grads0.translation, b)?;
            self.f1.rotation.adam_step(&eval.grads1.rotation, c)?;
            self.f1.translation.adam_step(&eval.grads1.translation, d)?;
        } else {
            self.report.skipped_updates += 1;
            log::warn!("non-finite gradient at iteration {it}; update skipped");
        }
        self.report.energy.push(t.energy);
        self.report.iso_canonical.push(t.iso_canonical);
        self.report.iso_cross.push(t.iso_cross);
        self.report.alpha.push(t.alpha);
        self.report.total.push(t.total);
        self.check_guard(it, t.total)?;
        self.iteration += 1;
        if self.iteration % self.cfg.checkpoint_every == 0 || self.iteration == self.cfg.iterations {
            let spread = canonical_spread(&self.f0, &self.f1, &self.g0, &self.g1)?;
            self.report.spread.push(SpreadSample {
                iteration: self.iteration,
                spread,
            });
            log::info!(
                "iter {}/{}: energy {:.5} iso {:.5} cross {:.5} alpha {:.2} spread {:.3}",
                self.iteration,
                self.cfg.iterations,
                t.energy,
                t.iso_canonical,
                t.iso_cross,
                alpha,
                spread
            );
            if let Some(dir) = self.checkpoint_dir.clone() {
                let path = dir.join("checkpoint.json");
                self.save_checkpoint(&path)?;
                self.last_checkpoint = Some(path);
            }
        }
        Ok(t)
    }

    fn check_guard(&mut self, it: usize, total: f64) -> Result<()> {
        if it == GUARD_REFERENCE_ITER {
            self.guard.reference = Some(total);
        }
        if let Some(reference) = self.guard.reference {
            if it > GUARD_REFERENCE_ITER && total > GUARD_FACTOR * reference {
                self.guard.over += 1;
                if self.guard.over >= GUARD_WINDOW {
                    return Err(Error::Diverged {
                        iteration: it,
                        loss: total,
                        reference,
                        window: GUARD_WINDOW,
                    });
                }
            } else {
                self.guard.over = 0;
            }
        }
        Ok(())
    }

    /// Steps until `iteration == until` (clamped to the configured count).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.cfg.iterations);
        while self.iteration < until {
            self.step()?;
        }
        Ok(())
    }

    /// Trains to completion and computes the final statistics.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.run_until(self.cfg.iterations)?;
        let c0 = self.f0.to_canonical(&self.g0.positions, &self.g0.features, Mode::Eval, None)?.canonical;
        let c1 = self.f1.to_canonical(&self.g1.positions, &self.g1.features, Mode::Eval, None)?.canonical;
        let m = match_sides(
            &MatchSide::new(&self.g0.colors, &self.g0.features, &c0)?,
            &MatchSide::new(&self.g1.colors, &self.g1.features, &c1)?,
            &self.cfg.energy,
            0.0,
            &mut self.rng,
        )?;
        self.report.final_stats = Some(FinalStats {
            mean_matched_energy: m.mean_energy(),
            canonical_spread: canonical_spread(&self.f0, &self.f1, &self.g0, &self.g1)?,
        });
        Ok(TrainOutcome {
            field0: self.f0,
            field1: self.f1,
            report: self.report,
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let payload = CheckpointPayload {
            config: self.cfg.clone(),
            iteration: self.iteration,
            field0: self.f0.clone(),
            field1: self.f1.clone(),
            adam: self.adam.to_vec(),
            rng: RngState::capture(&self.rng),
            report: self.report.clone(),
            guard: self.guard,
            fingerprint: self.fingerprint.clone(),
        };
        let body = serde_json::to_string(&payload)?;
        let raw = RawValue::from_string(body)?;
        let env = Envelope {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sha256: hex::encode(Sha256::digest(raw.get().as_bytes())),
            payload: &raw,
        };
        Ok(serde_json::to_vec(&env)?)
    }

    /// Atomically writes the full training state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Restores a trainer from checkpoint bytes. The clouds must be the ones
    /// the checkpoint was trained on.
    pub fn from_checkpoint_bytes(bytes: &[u8], g0: TrainCloud, g1: TrainCloud) -> Result<Trainer> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| Error::Checksum(format!("checkpoint envelope: {e}")))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint (format `{}`)", env.format)));
        }
        if env.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: env.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let digest = hex::encode(Sha256::digest(env.payload.get().as_bytes()));
        if digest != env.sha256 {
            return Err(Error::Checksum("checkpoint payload".into()));
        }
        let p: CheckpointPayload = serde_json::from_str(env.payload.get())?;
        let fp = fingerprint(&g0, &g1);
        if fp != p.fingerprint {
            return Err(Error::HashMismatch {
                what: "checkpoint clouds".into(),
                expected: p.fingerprint,
                found: fp,
            });
        }
        p.config.validate()?;
        if p.adam.len() != 4 {
            return Err(Error::shape(4, p.adam.len()));
        }
        let graph0 = NeighborGraph::build(&g0.positions, p.config.iso_k)?;
        let graph1 = NeighborGraph::build(&g1.positions, p.config.iso_k)?;
        let adam: [AdamState; 4] = p.adam.try_into().expect("length checked");
        Ok(Trainer {
            cfg: p.config,
            g0,
            g1,
            graph0,
            graph1,
            f0: p.field0,
            f1: p.field1,
            adam,
            rng: p.rng.restore()?,
            iteration: p.iteration,
            report: p.report,
            guard: p.guard,
            fingerprint: fp,
            checkpoint_dir: None,
            last_checkpoint: None,
            full_edges: [None, None],
        })
    }

    pub fn load_checkpoint(path: &Path, g0: TrainCloud, g1: TrainCloud) -> Result<Trainer> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, g0, g1)
    }
}

/// Trains both fields on normalized clouds with `cfg`.
pub fn train(g0: &FeaturedPointCloud, g1: &FeaturedPointCloud, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(TrainCloud::from_normalized(g0)?, TrainCloud::from_normalized(g1)?, cfg.clone())?;
    trainer.finish()
}
