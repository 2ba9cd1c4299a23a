//! Model assembly, optimization, transductive inference, and experiment
//! orchestration.
//!
//! A [`Model`] bundles the two encoders, the per-branch graph convolutions,
//! and the linear classifier. [`train_epoch`] runs one full-batch step:
//! refresh the feature-space graphs on schedule, score every node in eval
//! mode, build the reliable contrast set from those scores, then descend the
//! combined contrastive + cross-entropy loss with Adam. [`run_experiment`]
//! wires the whole pipeline from a labeled scene to a metrics report.

pub mod checkpoint;
pub mod metrics;

pub use metrics::{compute_metrics, mean_std, MetricsReport};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::contrast::{
    build_reliable_set, contrastive_loss_on_tape, cross_entropy_on_tape, LossTerms,
};
use crate::dataio::{Coord, HsiCube, TrainConfig};
use crate::encoders::{fuse, EncoderConfig, SpatialEncoder, SpectralEncoder};
use crate::graph::{GcnBranch, GraphData};
use crate::numkit::{stream, Affine, Mode, SeededRng, Tape, Tensor, ValueId};
use crate::preprocess::{
    extract_patches, fit_pca, normalize_bands, spectra_matrix, split_samples, ProjectedCube,
};
use crate::{Error, Result};

/// Hidden width of every graph-convolution layer.
pub const GCN_WIDTH: usize = 64;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Query nodes appended to the training nodes per inference block.
pub const PREDICT_BLOCK: usize = 512;
/// Cap on unlabeled scene pixels drawn into the training node set.
pub const MAX_UNLABELED_NODES: usize = 512;

/// One fixed set of nodes with the per-node inputs for both encoder streams.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub coords: Vec<Coord>,
    /// Scene labels; 0 marks nodes that only shape the graphs.
    pub labels: Vec<u16>,
    /// `[n, 1, bands]` full spectra.
    pub x_b: Tensor,
    /// `[n, channels, w, w]` PCA patches.
    pub x_p: Tensor,
}

impl SampleBatch {
    pub fn build(
        cube: &HsiCube,
        projected: &ProjectedCube,
        coords: &[Coord],
        w: usize,
    ) -> Result<SampleBatch> {
        if coords.is_empty() {
            return Err(Error::contract("SampleBatch::build: empty coordinate list"));
        }
        let (x_b_flat, x_p) = extract_patches(cube, projected, coords, w)?;
        let x_b = x_b_flat.reshaped(&[coords.len(), 1, cube.bands])?;
        let labels = coords.iter().map(|c| cube.label(c.row, c.col)).collect();
        Ok(SampleBatch { coords: coords.to_vec(), labels, x_b, x_p })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Row indices with a scene label, paired with 0-based class targets.
    pub fn labeled_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                rows.push(i);
                targets.push(l as usize - 1);
            }
        }
        (rows, targets)
    }
}

/// The two neighborhood graphs, both built over the same node set: one from
/// the spatial embedding, one from the joint-branch input features.
#[derive(Debug, Clone)]
pub struct GraphCache {
    pub a_p: GraphData,
    pub a_j: GraphData,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub h_p: ValueId,
    pub h_j: ValueId,
    pub logits: ValueId,
}

/// Materialized eval-mode outputs.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub h_p: Tensor,
    pub h_j: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub f_b: SpectralEncoder,
    pub f_p: SpatialEncoder,
    pub branch_p: GcnBranch,
    pub branch_j: GcnBranch,
    pub classifier: Affine,
    pub classes: usize,
    pub bands: usize,
    pub patch_channels: usize,
    pub no_fusion: bool,
}

impl Model {
    pub fn new(
        cfg: &TrainConfig,
        bands: usize,
        patch_channels: usize,
        classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Model> {
        cfg.validate_for_classes(classes)?;
        if classes < 2 {
            return Err(Error::Config(format!("classes: {classes} must be >= 2")));
        }
        let enc_cfg = EncoderConfig::from_train_config(cfg);
        let f_b = SpectralEncoder::new(&enc_cfg, bands, rng)?;
        let f_p = SpatialEncoder::new(&enc_cfg, patch_channels, cfg.w, rng)?;
        let widths = vec![GCN_WIDTH; cfg.depth];
        let j_in = if cfg.no_fusion { cfg.l_b } else { cfg.l_p + cfg.l_b };
        let branch_p = GcnBranch::new(cfg.l_p, &widths, rng);
        let branch_j = GcnBranch::new(j_in, &widths, rng);
        let head_in = branch_p.output_dim(cfg.l_p) + branch_j.output_dim(j_in);
        let classifier = Affine::new(head_in, classes, rng);
        Ok(Model {
            f_b,
            f_p,
            branch_p,
            branch_j,
            classifier,
            classes,
            bands,
            patch_channels,
            no_fusion: cfg.no_fusion,
        })
    }

    /// Walks every trainable tensor under the same names the forward pass
    /// registers on the tape.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        use crate::numkit::Layer;
        self.f_b.visit_params("f_b", f);
        self.f_p.visit_params("f_p", f);
        self.branch_p.visit_params("branch_p", f);
        self.branch_j.visit_params("branch_j", f);
        self.classifier.visit_params("classifier", f);
    }

    /// Walks the normalization running statistics (not trained, but state).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        use crate::numkit::Layer;
        self.f_b.visit_buffers("f_b", f);
        self.f_p.visit_buffers("f_p", f);
        self.branch_p.visit_buffers("branch_p", f);
        self.branch_j.visit_buffers("branch_j", f);
        self.classifier.visit_buffers("classifier", f);
    }

    /// Eval-mode encoder pass: the spatial embedding and the joint-branch
    /// input features, as plain tensors.
    pub fn encode_features(&mut self, batch: &SampleBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xb = tape.constant(&batch.x_b);
        let xp = tape.constant(&batch.x_p);
        let z_b = self.f_b.forward(&mut tape, "f_b", xb, Mode::Eval)?;
        let z_p = self.f_p.forward(&mut tape, "f_p", xp, Mode::Eval)?;
        let z_j = if self.no_fusion { z_b } else { fuse(&mut tape, z_p, z_b)? };
        Ok((tape.value(z_p).clone(), tape.value(z_j).clone()))
    }

    /// kNN graphs over the current embeddings of `batch`.
    pub fn build_graphs(&mut self, batch: &SampleBatch, k: usize) -> Result<GraphCache> {
        let (z_p, z_j) = self.encode_features(batch)?;
        Ok(GraphCache {
            a_p: GraphData::from_features(&z_p, k)?,
            a_j: GraphData::from_features(&z_j, k)?,
        })
    }

    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        batch: &SampleBatch,
        graphs: &GraphCache,
        mode: Mode,
    ) -> Result<TapeForward> {
        if graphs.a_p.n_nodes != batch.len() || graphs.a_j.n_nodes != batch.len() {
            return Err(Error::Contract(format!(
                "forward: graphs cover {} / {} nodes but the batch has {}",
                graphs.a_p.n_nodes,
                graphs.a_j.n_nodes,
                batch.len()
            )));
        }
        let xb = tape.constant(&batch.x_b);
        let xp = tape.constant(&batch.x_p);
        let z_b = self.f_b.forward(tape, "f_b", xb, mode)?;
        let z_p = self.f_p.forward(tape, "f_p", xp, mode)?;
        let z_j = if self.no_fusion { z_b } else { fuse(tape, z_p, z_b)? };
        let h_p = self.branch_p.forward(tape, "branch_p", &graphs.a_p.normalized, z_p, mode)?;
        let h_j = self.branch_j.forward(tape, "branch_j", &graphs.a_j.normalized, z_j, mode)?;
        let h = tape.concat_cols(h_p, h_j)?;
        let logits = self.classifier.forward(tape, "classifier", h)?;
        Ok(TapeForward { h_p, h_j, logits })
    }

    /// Full forward in eval mode; never touches running statistics.
    pub fn forward_eval(&mut self, batch: &SampleBatch, graphs: &GraphCache) -> Result<EvalOutput> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, batch, graphs, Mode::Eval)?;
        let probs = tape.softmax_rows(fwd.logits)?;
        Ok(EvalOutput {
            h_p: tape.value(fwd.h_p).clone(),
            h_j: tape.value(fwd.h_j).clone(),
            logits: tape.value(fwd.logits).clone(),
            probs: tape.value(probs).clone(),
        })
    }
}

/// First-order moment state for Adam, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update over every model parameter. Every parameter must have a
/// gradient; a missing name means the forward pass no longer exercises it.
pub fn adam_apply(
    model: &mut Model,
    adam: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    adam.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(adam.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(adam.step as i32);
    let mut failure: Option<Error> = None;
    let (m_map, v_map) = (&mut adam.m, &mut adam.v);
    model.visit_params(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(&name) else {
            failure = Some(Error::Contract(format!("optimizer: no gradient for parameter {name}")));
            return;
        };
        if g.shape() != p.shape() {
            failure = Some(Error::Contract(format!(
                "optimizer: gradient shape {:?} != parameter shape {:?} for {name}",
                g.shape(),
                p.shape()
            )));
            return;
        }
        let m = m_map.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = v_map.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..gd.len() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Everything that evolves over training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epoch: u64,
    pub rng: SeededRng,
    pub graphs: Option<GraphCache>,
}

impl TrainerState {
    pub fn new(model: Model, config: TrainConfig, rng: SeededRng) -> TrainerState {
        TrainerState { model, config, adam: AdamState::default(), epoch: 0, rng, graphs: None }
    }
}

/// Per-epoch observables that are not loss terms.
#[derive(Debug, Clone)]
pub struct EpochDiagnostics {
    pub pseudo_accepted: usize,
    pub pseudo_per_class: Vec<usize>,
    pub skipped_anchors: usize,
    /// Accuracy on the labeled training nodes, scored before the step.
    pub oa_train: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One full-batch training step.
///
/// Order of operations: rebuild the graphs from current features when the
/// epoch index hits the refresh period (or none exist yet), score all nodes
/// in eval mode, derive the reliable set from those scores, then take one
/// Adam step on `L_C + L_ce` in train mode. The epoch counter increments
/// after the step.
pub fn train_epoch(
    state: &mut TrainerState,
    batch: &SampleBatch,
) -> Result<(LossTerms, EpochDiagnostics)> {
    let cfg = state.config.clone();
    if state.graphs.is_none() || state.epoch % cfg.refresh_period as u64 == 0 {
        state.graphs = Some(state.model.build_graphs(batch, cfg.k)?);
    }
    let graphs = state.graphs.clone().expect("graphs were just ensured");

    let eval = state.model.forward_eval(batch, &graphs)?;
    let (rows, targets) = batch.labeled_rows();
    if rows.is_empty() {
        return Err(Error::data("train_epoch: batch has no labeled nodes"));
    }
    let hits = rows
        .iter()
        .zip(&targets)
        .filter(|(&r, &t)| argmax(eval.logits.row(r)) == t)
        .count();
    let oa_train = hits as f64 / rows.len() as f64;

    let set = build_reliable_set(&batch.labels, &eval.probs, cfg.tau)?;

    let mut tape = Tape::new();
    let fwd = state.model.forward_on_tape(&mut tape, batch, &graphs, Mode::Train)?;
    let l_ce_id = cross_entropy_on_tape(&mut tape, fwd.logits, &rows, &targets)?;
    let (l_c, loss_id) = if cfg.no_contrast {
        (0.0, l_ce_id)
    } else {
        let l_c_id = contrastive_loss_on_tape(&mut tape, fwd.h_j, fwd.h_p, &set, cfg.temperature)?;
        let total = tape.add(l_c_id, l_ce_id)?;
        (tape.value(l_c_id).data()[0], total)
    };
    let l_ce = tape.value(l_ce_id).data()[0];
    tape.backward(loss_id)?;
    let grads = tape.param_grads()?;
    adam_apply(&mut state.model, &mut state.adam, &grads, cfg.learning_rate)?;
    state.epoch += 1;

    Ok((
        LossTerms::new(l_c, l_ce),
        EpochDiagnostics {
            pseudo_accepted: set.pseudo_accepted_total(),
            pseudo_per_class: set.pseudo_accepted_per_class.clone(),
            skipped_anchors: set.skipped_anchors,
            oa_train,
        },
    ))
}

pub const LOG_HEADER: &str = "epoch,L_C,L_ce,L_total,pseudo_accepted,OA_train";

pub fn log_line(epoch: u64, terms: &LossTerms, diag: &EpochDiagnostics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{},{:.6}",
        epoch, terms.l_c, terms.l_ce, terms.l_total, diag.pseudo_accepted, diag.oa_train
    )
}

/// Transductive class predictions (1-based) for arbitrary query pixels.
///
/// Queries that are training nodes are scored on the training graph itself.
/// The remaining distinct queries are sorted into scan order, chopped into
/// blocks of `block_size`, and each block is appended to the full training
/// node set so the graphs keep their supervised structure. Results are
/// independent of query order and multiplicity.
pub fn predict(
    state: &mut TrainerState,
    cube: &HsiCube,
    projected: &ProjectedCube,
    train_batch: &SampleBatch,
    queries: &[Coord],
    block_size: usize,
) -> Result<Vec<u16>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    if block_size == 0 {
        return Err(Error::contract("predict: block_size must be >= 1"));
    }
    if state.graphs.is_none() {
        state.graphs = Some(state.model.build_graphs(train_batch, state.config.k)?);
    }
    let graphs = state.graphs.clone().expect("graphs were just ensured");
    let eval = state.model.forward_eval(train_batch, &graphs)?;
    let mut by_coord: BTreeMap<Coord, u16> = BTreeMap::new();
    for (i, c) in train_batch.coords.iter().enumerate() {
        by_coord.insert(*c, argmax(eval.logits.row(i)) as u16 + 1);
    }

    let mut extra: Vec<Coord> =
        queries.iter().copied().filter(|c| !by_coord.contains_key(c)).collect();
    extra.sort();
    extra.dedup();
    for block in extra.chunks(block_size) {
        let mut coords = train_batch.coords.clone();
        coords.extend_from_slice(block);
        let batch = SampleBatch::build(cube, projected, &coords, state.config.w)?;
        let g = state.model.build_graphs(&batch, state.config.k)?;
        let out = state.model.forward_eval(&batch, &g)?;
        let base = train_batch.len();
        for (j, c) in block.iter().enumerate() {
            by_coord.insert(*c, argmax(out.logits.row(base + j)) as u16 + 1);
        }
    }
    Ok(queries.iter().map(|c| by_coord[c]).collect())
}

/// Full outcome of one training run.
#[derive(Debug)]
pub struct ExperimentArtifacts {
    pub report: MetricsReport,
    pub state: TrainerState,
    /// Header line plus one CSV line per epoch.
    pub log: Vec<String>,
    pub loss_history: Vec<LossTerms>,
    pub train_coords: Vec<Coord>,
    pub test_coords: Vec<Coord>,
    /// Test-set predictions, aligned with `test_coords`.
    pub predictions: Vec<u16>,
}

/// Deterministic data preparation shared by training and checkpoint-driven
/// evaluation: the labeled split, band normalization, the PCA fitted on the
/// training spectra, and the training node set (labeled draw plus a capped
/// sample of unlabeled pixels so pseudo-labeling has candidates).
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub normalized: HsiCube,
    pub projected: ProjectedCube,
    pub batch: SampleBatch,
    pub train_coords: Vec<Coord>,
    pub test_coords: Vec<Coord>,
}

pub fn prepare_experiment(cfg: &TrainConfig, cube: &HsiCube) -> Result<ExperimentSetup> {
    cfg.validate_for_classes(cube.classes)?;
    let base = SeededRng::new(cfg.seed);
    let mut split_rng = base.derive(stream::SPLIT);
    let (train_coords, test_coords) = split_samples(cube, cfg.per_class, &mut split_rng)?;

    let normalized = normalize_bands(cube);
    let train_spectra = spectra_matrix(&normalized, &train_coords)?;
    let pca = fit_pca(&train_spectra, cfg.p)?;
    let projected = ProjectedCube::new(&normalized, &pca)?;

    let mut node_coords = train_coords.clone();
    let mut unlabeled = cube.coords_with_label(0);
    if unlabeled.len() > MAX_UNLABELED_NODES {
        let mut pick_rng = base.derive(stream::UNLABELED);
        pick_rng.shuffle(&mut unlabeled);
        unlabeled.truncate(MAX_UNLABELED_NODES);
        unlabeled.sort();
    }
    node_coords.extend(unlabeled);
    let batch = SampleBatch::build(&normalized, &projected, &node_coords, cfg.w)?;
    Ok(ExperimentSetup { normalized, projected, batch, train_coords, test_coords })
}

/// Trains on `cube` under `cfg` and evaluates on the held-out labeled
/// pixels. Fully deterministic in (`cfg`, `cube`).
pub fn run_experiment(cfg: &TrainConfig, cube: &HsiCube) -> Result<ExperimentArtifacts> {
    let t0 = std::time::Instant::now();
    let ExperimentSetup { normalized, projected, batch, train_coords, test_coords } =
        prepare_experiment(cfg, cube)?;

    let base = SeededRng::new(cfg.seed);
    let mut init_rng = base.derive(stream::MODEL_INIT);
    let model = Model::new(cfg, cube.bands, projected.channels, cube.classes, &mut init_rng)?;
    let mut state = TrainerState::new(model, cfg.clone(), base);

    let mut log = vec![LOG_HEADER.to_string()];
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let epoch = state.epoch;
        let (terms, diag) = train_epoch(&mut state, &batch)?;
        log.push(log_line(epoch, &terms, &diag));
        loss_history.push(terms);
    }

    let predictions =
        predict(&mut state, &normalized, &projected, &batch, &test_coords, PREDICT_BLOCK)?;
    let truth: Vec<u16> = test_coords.iter().map(|c| cube.label(c.row, c.col)).collect();
    let mut report = compute_metrics(&predictions, &truth, cube.classes)?;
    report.wall_clock_seconds = t0.elapsed().as_secs_f64();

    Ok(ExperimentArtifacts {
        report,
        state,
        log,
        loss_history,
        train_coords,
        test_coords,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
}

/// Scores aggregated over independent seeds (splits and initializations
/// both vary with the seed).
#[derive(Debug, Clone, Serialize)]
pub struct RepeatedReport {
    pub seeds: Vec<u64>,
    pub oa: SummaryStat,
    pub aa: SummaryStat,
    pub f1_macro: SummaryStat,
    pub kappa: SummaryStat,
    pub runs: Vec<MetricsReport>,
}

pub fn run_repeated(cfg: &TrainConfig, cube: &HsiCube, seeds: &[u64]) -> Result<RepeatedReport> {
    if seeds.is_empty() {
        return Err(Error::contract("run_repeated: need at least one seed"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        runs.push(run_experiment(&c, cube)?.report);
    }
    let stat = |f: &dyn Fn(&MetricsReport) -> f64| {
        let vals: Vec<f64> = runs.iter().map(f).collect();
        let (mean, std) = mean_std(&vals);
        SummaryStat { mean, std }
    };
    Ok(RepeatedReport {
        seeds: seeds.to_vec(),
        oa: stat(&|r| r.oa),
        aa: stat(&|r| r.aa),
        f1_macro: stat(&|r| r.f1_macro),
        kappa: stat(&|r| r.kappa),
        runs,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};

    pub(crate) fn tiny_spec() -> SynthSpec {
        SynthSpec {
            height: 14,
            width: 14,
            bands: 8,
            classes: 3,
            regions_per_class: 2,
            smoothness: 1.0,
            sigma: 0.02,
            boundary_mix: 0.0,
            seed: 7,
        }
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 5,
            w: 5,
            p: 4,
            l_b: 16,
            l_p: 16,
            depth: 1,
            epochs: 3,
            per_class: 6,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_setup() -> (HsiCube, TrainConfig, SampleBatch, TrainerState) {
        let cube = generate_synthetic(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let base = SeededRng::new(cfg.seed);
        let (train, _) = split_samples(&cube, cfg.per_class, &mut base.derive(stream::SPLIT)).unwrap();
        let normalized = normalize_bands(&cube);
        let spectra = spectra_matrix(&normalized, &train).unwrap();
        let pca = fit_pca(&spectra, cfg.p).unwrap();
        let projected = ProjectedCube::new(&normalized, &pca).unwrap();
        let batch = SampleBatch::build(&normalized, &projected, &train, cfg.w).unwrap();
        let model = Model::new(&cfg, cube.bands, cfg.p, cube.classes, &mut base.derive(stream::MODEL_INIT)).unwrap();
        let state = TrainerState::new(model, cfg.clone(), base);
        (cube, cfg, batch, state)
    }

    #[test]
    fn batch_shapes_and_labels_follow_the_coordinates() {
        let (cube, cfg, batch, _) = tiny_setup();
        let n = batch.len();
        assert_eq!(batch.x_b.shape(), &[n, 1, cube.bands]);
        assert_eq!(batch.x_p.shape(), &[n, cfg.p, cfg.w, cfg.w]);
        assert!(batch.labels.iter().all(|&l| l >= 1 && l as usize <= cube.classes));
        let (rows, targets) = batch.labeled_rows();
        assert_eq!(rows.len(), n);
        assert_eq!(targets.len(), n);
        assert!(targets.iter().all(|&t| t < cube.classes));
    }

    #[test]
    fn logits_have_one_column_per_class() {
        let (cube, cfg, batch, mut state) = tiny_setup();
        let graphs = state.model.build_graphs(&batch, cfg.k).unwrap();
        let out = state.model.forward_eval(&batch, &graphs).unwrap();
        assert_eq!(out.logits.shape(), &[batch.len(), cube.classes]);
        assert_eq!(out.h_p.shape()[1], GCN_WIDTH);
        assert_eq!(out.h_j.shape()[1], GCN_WIDTH);
        for r in 0..batch.len() {
            let s: f64 = out.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn skipping_fusion_changes_joint_branch_input_width() {
        let (cube, mut cfg, batch, _) = tiny_setup();
        cfg.no_fusion = true;
        let mut rng = SeededRng::new(3);
        let mut model = Model::new(&cfg, cube.bands, cfg.p, cube.classes, &mut rng).unwrap();
        let mut names = Vec::new();
        model.visit_params(&mut |n, t| names.push((n, t.shape().to_vec())));
        let (_, shape) = names
            .iter()
            .find(|(n, _)| n == "branch_j.0.weight")
            .expect("joint branch first layer");
        assert_eq!(shape[0], cfg.l_b);
        let graphs = model.build_graphs(&batch, cfg.k).unwrap();
        let out = model.forward_eval(&batch, &graphs).unwrap();
        assert_eq!(out.logits.shape(), &[batch.len(), cube.classes]);
    }

    #[test]
    fn depth_zero_branches_feed_embeddings_straight_to_the_classifier() {
        let (cube, mut cfg, batch, _) = tiny_setup();
        cfg.depth = 0;
        let mut rng = SeededRng::new(3);
        let mut model = Model::new(&cfg, cube.bands, cfg.p, cube.classes, &mut rng).unwrap();
        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n));
        assert!(names.iter().all(|n| !n.starts_with("branch_")));
        let (_, shape) = {
            let mut found = None;
            model.visit_params(&mut |n, t| {
                if n == "classifier.weight" {
                    found = Some((n, t.shape().to_vec()));
                }
            });
            found.unwrap()
        };
        assert_eq!(shape[0], cfg.l_p + (cfg.l_p + cfg.l_b));
        let graphs = model.build_graphs(&batch, cfg.k).unwrap();
        let out = model.forward_eval(&batch, &graphs).unwrap();
        assert_eq!(out.logits.shape(), &[batch.len(), cube.classes]);
    }

    #[test]
    fn eval_pass_is_idempotent_and_leaves_buffers_alone() {
        let (_, cfg, batch, mut state) = tiny_setup();
        let graphs = state.model.build_graphs(&batch, cfg.k).unwrap();
        let mut before = Vec::new();
        state.model.visit_buffers(&mut |n, t| before.push((n, t.clone())));
        let a = state.model.forward_eval(&batch, &graphs).unwrap();
        let b = state.model.forward_eval(&batch, &graphs).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.probs.data(), b.probs.data());
        let mut after = Vec::new();
        state.model.visit_buffers(&mut |n, t| after.push((n, t.clone())));
        assert_eq!(before.len(), after.len());
        for ((n1, t1), (n2, t2)) in before.iter().zip(&after) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "buffer {n1} changed during eval");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (_, _, batch, mut state) = tiny_setup();
        state.config.learning_rate = 0.0;
        let mut before = Vec::new();
        state.model.visit_params(&mut |n, t| before.push((n, t.clone())));
        train_epoch(&mut state, &batch).unwrap();
        let mut after = Vec::new();
        state.model.visit_params(&mut |n, t| after.push((n, t.clone())));
        for ((n1, t1), (_, t2)) in before.iter().zip(&after) {
            assert_eq!(t1.data(), t2.data(), "parameter {n1} moved at lr = 0");
        }
        assert_eq!(state.adam.step, 1);
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn graph_construction_is_a_pure_function_of_state_and_batch() {
        // Rebuilding twice from the same state gives the same graphs, and
        // two independently trained copies of the state stay in lockstep.
        // (A training pass does move the normalization running statistics
        // even at lr = 0, so graphs may legitimately change across epochs.)
        let (_, cfg, batch, mut state) = tiny_setup();
        let g1 = state.model.build_graphs(&batch, cfg.k).unwrap();
        let g2 = state.model.build_graphs(&batch, cfg.k).unwrap();
        assert_eq!(*g1.a_p.normalized, *g2.a_p.normalized);
        assert_eq!(*g1.a_j.normalized, *g2.a_j.normalized);

        let mut twin = state.clone();
        state.config.refresh_period = 2;
        twin.config.refresh_period = 2;
        for _ in 0..3 {
            train_epoch(&mut state, &batch).unwrap();
            train_epoch(&mut twin, &batch).unwrap();
        }
        let (ga, gb) = (state.graphs.unwrap(), twin.graphs.unwrap());
        assert_eq!(*ga.a_p.normalized, *gb.a_p.normalized);
        assert_eq!(*ga.a_j.normalized, *gb.a_j.normalized);
        assert_eq!(*ga.a_p.adjacency, *gb.a_p.adjacency);
    }

    #[test]
    fn identical_seeds_reproduce_identical_loss_trajectories() {
        let (_, _, batch, state) = tiny_setup();
        let mut s1 = state.clone();
        let mut s2 = state;
        for _ in 0..3 {
            let (t1, d1) = train_epoch(&mut s1, &batch).unwrap();
            let (t2, d2) = train_epoch(&mut s2, &batch).unwrap();
            assert_eq!(t1, t2);
            assert_eq!(d1.pseudo_accepted, d2.pseudo_accepted);
            assert_eq!(d1.oa_train, d2.oa_train);
        }
    }

    #[test]
    fn losses_trend_down_on_a_separable_scene() {
        let (_, _, batch, mut state) = tiny_setup();
        state.config.learning_rate = 3e-3;
        let mut totals = Vec::new();
        for _ in 0..12 {
            let (terms, _) = train_epoch(&mut state, &batch).unwrap();
            assert!(terms.l_total.is_finite());
            totals.push(terms.l_total);
        }
        assert!(
            totals.last().unwrap() < &totals[0],
            "no overall decrease: {totals:?}"
        );
        let drops = totals.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops >= 8, "only {drops}/11 decreasing steps: {totals:?}");
    }

    #[test]
    fn contrast_free_training_reports_zero_contrastive_loss() {
        let (_, _, batch, mut state) = tiny_setup();
        state.config.no_contrast = true;
        let (terms, _) = train_epoch(&mut state, &batch).unwrap();
        assert_eq!(terms.l_c, 0.0);
        assert_eq!(terms.l_total, terms.l_ce);
    }

    #[test]
    fn log_lines_are_stable_csv() {
        let terms = LossTerms::new(0.5, 0.25);
        let diag = EpochDiagnostics {
            pseudo_accepted: 7,
            pseudo_per_class: vec![3, 4],
            skipped_anchors: 0,
            oa_train: 0.875,
        };
        assert_eq!(log_line(12, &terms, &diag), "12,0.500000,0.250000,0.750000,7,0.875000");
        assert_eq!(LOG_HEADER.split(',').count(), log_line(0, &terms, &diag).split(',').count());
    }

    #[test]
    fn train_coord_queries_match_training_graph_predictions() {
        let (cube, cfg, batch, mut state) = tiny_setup();
        for _ in 0..2 {
            train_epoch(&mut state, &batch).unwrap();
        }
        // Rebuild the projection exactly as tiny_setup did (train coords
        // only), so patches match the training batch.
        let normalized = normalize_bands(&cube);
        let train_spectra = spectra_matrix(&normalized, &batch.coords).unwrap();
        let pca = fit_pca(&train_spectra, cfg.p).unwrap();
        let projected = ProjectedCube::new(&normalized, &pca).unwrap();
        let preds =
            predict(&mut state, &normalized, &projected, &batch, &batch.coords, 4).unwrap();
        let graphs = state.graphs.clone().unwrap();
        let eval = state.model.forward_eval(&batch, &graphs).unwrap();
        for (i, &p) in preds.iter().enumerate() {
            assert_eq!(p as usize, argmax(eval.logits.row(i)) + 1);
        }
    }

    #[test]
    fn predictions_ignore_query_order_and_duplicates() {
        let (cube, cfg, batch, mut state) = tiny_setup();
        train_epoch(&mut state, &batch).unwrap();
        let normalized = normalize_bands(&cube);
        let train_spectra = spectra_matrix(&normalized, &batch.coords).unwrap();
        let pca = fit_pca(&train_spectra, cfg.p).unwrap();
        let projected = ProjectedCube::new(&normalized, &pca).unwrap();
        let queries: Vec<Coord> =
            (0..6).flat_map(|r| (0..6).map(move |c| Coord::new(r, c))).collect();
        let forward = predict(&mut state, &normalized, &projected, &batch, &queries, 7).unwrap();
        let mut reversed_q = queries.clone();
        reversed_q.reverse();
        let mut reversed = predict(&mut state, &normalized, &projected, &batch, &reversed_q, 7).unwrap();
        reversed.reverse();
        assert_eq!(forward, reversed);
        let doubled: Vec<Coord> = queries.iter().chain(queries.iter()).copied().collect();
        let twice = predict(&mut state, &normalized, &projected, &batch, &doubled, 7).unwrap();
        assert_eq!(&twice[..queries.len()], &forward[..]);
        assert_eq!(&twice[queries.len()..], &forward[..]);
        assert!(predict(&mut state, &normalized, &projected, &batch, &[], 7).unwrap().is_empty());
    }

    #[test]
    fn experiment_is_deterministic_end_to_end() {
        let cube = generate_synthetic(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 4;
        let a = run_experiment(&cfg, &cube).unwrap();
        let b = run_experiment(&cfg, &cube).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.report.oa, b.report.oa);
        assert_eq!(a.report.confusion, b.report.confusion);
        assert_eq!(a.log.len(), cfg.epochs + 1);
        assert_eq!(a.log[0], LOG_HEADER);
        assert!(a.report.wall_clock_seconds > 0.0);
        // Different seed; the split alone differs.
        let mut cfg2 = cfg.clone();
        cfg2.seed = 99;
        let c = run_experiment(&cfg2, &cube).unwrap();
        assert_ne!(a.train_coords, c.train_coords);
    }

    #[test]
    fn unlabeled_pixels_join_the_training_nodes_up_to_the_cap() {
        let mut cube = generate_synthetic(&tiny_spec()).unwrap();
        // Mask a stripe so the scene has unlabeled pixels.
        for i in 0..40 {
            cube.labels[i] = 0;
        }
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let arts = run_experiment(&cfg, &cube).unwrap();
        let n_train = arts.train_coords.len();
        let batch_nodes = arts.state.graphs.as_ref().unwrap().a_p.n_nodes;
        assert_eq!(batch_nodes, n_train + 40.min(MAX_UNLABELED_NODES));
    }

    #[test]
    fn repeated_runs_aggregate_mean_and_sample_std() {
        let cube = generate_synthetic(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let rep = run_repeated(&cfg, &cube, &[1, 2, 3]).unwrap();
        assert_eq!(rep.runs.len(), 3);
        let oas: Vec<f64> = rep.runs.iter().map(|r| r.oa).collect();
        let (mean, std) = mean_std(&oas);
        assert_eq!(rep.oa.mean, mean);
        assert_eq!(rep.oa.std, std);
        assert!(run_repeated(&cfg, &cube, &[]).is_err());
    }
}
