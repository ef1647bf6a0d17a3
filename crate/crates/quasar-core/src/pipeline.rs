//! Command-level workflows shared by the CLI binary and the test suites:
//! packing verification sweeps, teacher and supernet training, the
//! constrained search, latency estimation, and quantized export. Every
//! workflow is deterministic given its seeds and writes a run manifest next
//! to its outputs.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, Split, SyntheticDataset};
use crate::dsp::{sweep_pack3, sweep_pack4, sweep_w8, LaneLayout, LaneSign, SweepReport};
use crate::error::{Error, Result};
use crate::evo::{evolve, Candidate, EvoParams};
use crate::hw::{
    estimate_fps, resource_report, select_compute_strategy, ComputePlan, CostTable,
    HardwareProfile, LayerPlanEntry, QuantMode, ResourceReport, StrategyRule, TileConfig,
};
use crate::manifest::RunManifest;
use crate::nas::{
    sample_subnet, train_supernet, ModelArch, SearchSpace, SubnetConfig, Supernet,
    SupernetTrainConfig, TrainReport,
};
use crate::quant::{bops, model_size_mb, quantize_rows, QuantParams};
use crate::qvt::{read_qvt, write_qvt, QvtTensor};
use crate::vit::{
    backward, evaluate, forward, kd_loss, sgd_step, KdConfig, ModelParams, QuantKind,
    ToyModelConfig,
};
use crate::nas::cosine_lr;
use rand::prelude::*;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = crate::error::read_file(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pack-verify

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackVerifyMode {
    All,
    Pack3,
    Pack4,
    W8,
}

#[derive(Debug, Clone)]
pub struct PackVerifyOutcome {
    pub lines: Vec<String>,
    pub ok: bool,
}

/// Runs the exhaustive packing sweeps. `corrupt_lanes` swaps in a broken
/// lane layout to prove the harness detects mismatches.
pub fn run_pack_verify(mode: PackVerifyMode, jobs: usize, corrupt_lanes: bool) -> PackVerifyOutcome {
    let layout3 = if corrupt_lanes {
        LaneLayout::corrupted()
    } else {
        LaneLayout::pack3(LaneSign::Signed)
    };
    let layout4 = if corrupt_lanes {
        let mut l = LaneLayout::corrupted();
        l.offsets.push(27);
        l.signedness.push(LaneSign::Signed);
        l
    } else {
        LaneLayout::pack4(LaneSign::Signed)
    };
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, rep: SweepReport| {
        if rep.failures == 0 {
            lines.push(format!("{} {name} cases OK", rep.cases));
        } else {
            ok = false;
            lines.push(format!(
                "{} {name} cases, {} FAILED (first: {})",
                rep.cases,
                rep.failures,
                rep.first_failure.unwrap_or_default()
            ));
        }
    };
    if matches!(mode, PackVerifyMode::All | PackVerifyMode::Pack3) {
        record("pack3", sweep_pack3(&layout3, jobs));
    }
    if matches!(mode, PackVerifyMode::All | PackVerifyMode::Pack4) {
        record("pack4", sweep_pack4(&layout4, jobs));
    }
    if matches!(mode, PackVerifyMode::All | PackVerifyMode::W8) {
        record("w8-decomposition", sweep_w8(jobs));
    }
    PackVerifyOutcome { lines, ok }
}

// ---------------------------------------------------------------------------
// estimate

/// A subnet plus the fixed geometry needed to expand it into GEMM layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub arch: ModelArch,
    pub subnet: SubnetConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub mode: QuantMode,
    pub strategy_rule: StrategyRule,
    pub plan: ComputePlan,
    pub resources: ResourceReport,
    pub total_cycles: u64,
    pub fps: f64,
    pub param_count: u64,
    pub weighted_mixed_ratio: f64,
    pub model_size_mb: f64,
    pub macs: u64,
    pub bops_g: f64,
    pub layers: Vec<LayerPlanEntry>,
}

pub struct EstimateOptions {
    pub mode: QuantMode,
    pub rule: StrategyRule,
    pub act_bits: u32,
    pub tiles: Option<Vec<TileConfig>>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            mode: QuantMode::W4A6,
            rule: StrategyRule::Standard,
            act_bits: 6,
            tiles: None,
        }
    }
}

pub fn run_estimate(
    model: &ModelDescriptor,
    profile: &HardwareProfile,
    costs: &CostTable,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let plan = select_compute_strategy(profile, costs, opts.mode, opts.rule)?;
    let est = estimate_fps(
        &model.subnet,
        &model.arch,
        profile,
        &plan,
        opts.tiles.as_deref(),
    )?;
    let params = model.subnet.param_count(&model.arch);
    let ratio = model.subnet.weighted_mixed_ratio();
    let macs = model.subnet.macs(&model.arch);
    Ok(EstimateReport {
        mode: opts.mode,
        strategy_rule: opts.rule,
        resources: resource_report(&plan, profile),
        plan,
        total_cycles: est.total_cycles,
        fps: est.fps,
        param_count: params,
        weighted_mixed_ratio: ratio,
        model_size_mb: model_size_mb(params, ratio),
        macs,
        bops_g: bops(macs, ratio, opts.act_bits) / 1e9,
        layers: est.layers,
    })
}

/// Fixed-width text rendering of an estimate report.
pub fn format_estimate_table(report: &EstimateReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>6} {:>6} {:>6} {:>5} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "layer", "M", "N", "F", "cnt", "l_in", "l_wgt", "l_out", "l_cmpt", "cycles"
    ));
    for l in &report.layers {
        out.push_str(&format!(
            "{:<20} {:>6} {:>6} {:>6} {:>5} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
            l.name,
            l.shape.m,
            l.shape.n,
            l.shape.f,
            l.count,
            l.cycles.l_in,
            l.cycles.l_wgt,
            l.cycles.l_out,
            l.cycles.l_cmpt,
            l.total_cycles
        ));
    }
    out.push_str(&format!(
        "total cycles {}  fps {:.2}  dsp {:.1}%  lut {:.1}%  size {:.3} MB  bops {:.2} G\n",
        report.total_cycles,
        report.fps,
        report.resources.dsp_utilization * 100.0,
        report.resources.lut_utilization * 100.0,
        report.model_size_mb,
        report.bops_g
    ));
    out
}

// ---------------------------------------------------------------------------
// train-teacher

pub struct TeacherOptions {
    pub seed: u64,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub out_dir: PathBuf,
}

impl Default for TeacherOptions {
    fn default() -> Self {
        TeacherOptions {
            seed: 0,
            data_seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            out_dir: PathBuf::from("teacher"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub epochs: usize,
    pub final_loss: f64,
}

/// A wider, unquantized model than anything in the search space.
fn teacher_config(arch: &ModelArch) -> ToyModelConfig {
    ToyModelConfig {
        embed_dim: 24,
        depth: 2,
        heads: arch.num_heads,
        hidden_dims: vec![24, 24],
        expansion_ratios: vec![2.0, 2.0],
        mixed_ratios: vec![0.0, 0.0],
        num_classes: arch.num_classes,
        token_dim: arch.token_dim,
        act_bits: 6,
        quant: QuantKind::Off,
    }
}

fn train_plain(
    params: &mut ModelParams,
    cfg: &ToyModelConfig,
    dataset: &SyntheticDataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = dataset.indices(Split::Train).to_vec();
    let steps_per_epoch = idx.len().div_ceil(batch_size);
    let total = steps_per_epoch * epochs;
    let mut step = 0;
    let mut last = 0.0;
    for _ in 0..epochs {
        let mut order = idx.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (x, y) = dataset.batch(chunk);
            let (logits, cache) = forward(params, cfg, &x)?;
            let (loss, dlogits) = kd_loss(&logits, &y, &KdConfig::hard_labels_only())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = backward(params, cfg, &cache, &dlogits);
            sgd_step(params, &grads, cosine_lr(lr, step, total));
            last = loss;
            step += 1;
        }
    }
    Ok(last)
}

/// Trains the distillation teacher and exports its logits for the whole
/// dataset in QVT form.
pub fn run_train_teacher(arch: &ModelArch, opts: &TeacherOptions) -> Result<TeacherReport> {
    let data_cfg = DatasetConfig {
        seed: opts.data_seed,
        token_dim: arch.token_dim,
        tokens: arch.tokens,
        num_classes: arch.num_classes,
        ..DatasetConfig::default()
    };
    let dataset = SyntheticDataset::generate(&data_cfg)?;
    let cfg = teacher_config(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ModelParams::init(&cfg, &mut rng)?;
    let final_loss = train_plain(
        &mut params,
        &cfg,
        &dataset,
        opts.epochs,
        opts.batch_size,
        opts.lr,
        opts.seed,
    )?;

    std::fs::create_dir_all(&opts.out_dir)?;
    // Logits for every sample, in dataset order.
    let (all_x, _) = dataset.batch(&(0..dataset.len()).collect::<Vec<_>>());
    let (logits, _) = forward(&params, &cfg, &all_x)?;
    write_qvt(
        &opts.out_dir.join("teacher_logits.qvt"),
        &QvtTensor::from_f64(&logits),
    )?;
    write_json(&opts.out_dir.join("teacher_config.json"), &cfg)?;
    write_json(&opts.out_dir.join("dataset.json"), &data_cfg)?;

    let (tx, ty) = dataset.batch(dataset.indices(Split::Train));
    let (vx, vy) = dataset.batch(dataset.indices(Split::Val));
    let report = TeacherReport {
        train_accuracy: evaluate(&params, &cfg, &tx, &ty)?,
        val_accuracy: evaluate(&params, &cfg, &vx, &vy)?,
        epochs: opts.epochs,
        final_loss,
    };
    write_json(&opts.out_dir.join("teacher_report.json"), &report)?;
    RunManifest::new("train-teacher")
        .seed("seed", opts.seed)
        .seed("data_seed", opts.data_seed)
        .output(&opts.out_dir.join("teacher_logits.qvt"))
        .write(&opts.out_dir.join("run.manifest.json"))?;
    log::info!(
        "teacher: train acc {:.3}, val acc {:.3}",
        report.train_accuracy,
        report.val_accuracy
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// train-supernet

pub struct TrainSupernetOptions {
    pub space_path: PathBuf,
    pub arch: ModelArch,
    pub act_bits: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub kd_teacher: Option<PathBuf>,
    pub kd_alpha: f64,
    pub kd_tau: f64,
    pub out_dir: PathBuf,
}

impl Default for TrainSupernetOptions {
    fn default() -> Self {
        TrainSupernetOptions {
            space_path: PathBuf::from("configs/toy_space.json"),
            arch: ModelArch::default(),
            act_bits: 6,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            seed: 0,
            data_seed: 0,
            kd_teacher: None,
            kd_alpha: 0.5,
            kd_tau: 2.0,
            out_dir: PathBuf::from("supernet"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetRunReport {
    pub train: TrainReport,
    pub largest_subnet_val_accuracy: f64,
}

pub fn run_train_supernet(opts: &TrainSupernetOptions) -> Result<SupernetRunReport> {
    let space = SearchSpace::load(&opts.space_path)?;
    let data_cfg = DatasetConfig {
        seed: opts.data_seed,
        token_dim: opts.arch.token_dim,
        tokens: opts.arch.tokens,
        num_classes: opts.arch.num_classes,
        ..DatasetConfig::default()
    };
    let dataset = SyntheticDataset::generate(&data_cfg)?;
    let teacher_logits: Option<Array2<f64>> = match &opts.kd_teacher {
        Some(dir) => {
            let teacher_data: DatasetConfig = read_json(&dir.join("dataset.json"))?;
            let ours = serde_json::to_string(&data_cfg).unwrap();
            let theirs = serde_json::to_string(&teacher_data).unwrap();
            if ours != theirs {
                return Err(Error::InvalidConfig(
                    "teacher logits were produced on a different dataset".into(),
                ));
            }
            let t = read_qvt(&dir.join("teacher_logits.qvt"))?.to_f64()?;
            Some(
                t.into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
            )
        }
        None => None,
    };

    let mut net = Supernet::new(space, opts.arch, opts.act_bits, opts.seed)?;
    let train_cfg = SupernetTrainConfig {
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        lr: opts.lr,
        seed: opts.seed,
        kd_alpha: opts.kd_alpha,
        kd_tau: opts.kd_tau,
    };
    let train = train_supernet(&mut net, &dataset, &train_cfg, teacher_logits.as_ref())?;

    net.save(&opts.out_dir)?;
    write_json(&opts.out_dir.join("dataset.json"), &data_cfg)?;
    let largest = SubnetConfig::largest(&net.space);
    let acc = net.subnet_accuracy(&largest, &dataset, Split::Val)?;
    let report = SupernetRunReport {
        train,
        largest_subnet_val_accuracy: acc,
    };
    write_json(&opts.out_dir.join("train_report.json"), &report)?;
    let mut manifest = RunManifest::new("train-supernet")
        .seed("seed", opts.seed)
        .seed("data_seed", opts.data_seed)
        .input(&opts.space_path)?;
    if let Some(dir) = &opts.kd_teacher {
        manifest = manifest.input(&dir.join("teacher_logits.qvt"))?;
    }
    manifest
        .output(&opts.out_dir)
        .write(&opts.out_dir.join("run.manifest.json"))?;
    log::info!("supernet: largest-subnet val acc {acc:.3}");
    Ok(report)
}

// ---------------------------------------------------------------------------
// search

pub struct SearchOptions {
    pub space_path: PathBuf,
    pub supernet_dir: PathBuf,
    pub profile_path: PathBuf,
    pub costs_path: Option<PathBuf>,
    pub evo: EvoParams,
    pub out_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub rank: usize,
    pub config: SubnetConfig,
    pub fitness: f64,
    pub fps: f64,
    pub total_cycles: u64,
    pub param_count: u64,
    pub model_size_mb: f64,
    pub bops_g: f64,
    pub per_layer_cycles: Vec<LayerPlanEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResults {
    pub target_fps: f64,
    pub seed: u64,
    pub population_size: usize,
    pub generations: usize,
    pub candidates: Vec<RankedCandidate>,
}

pub fn run_search(opts: &SearchOptions) -> Result<SearchResults> {
    let space = SearchSpace::load(&opts.space_path)?;
    let net = Supernet::load(&opts.supernet_dir)?;
    if net.space != space {
        return Err(Error::InvalidConfig(
            "search space does not match the supernet checkpoint".into(),
        ));
    }
    let data_cfg: DatasetConfig = read_json(&opts.supernet_dir.join("dataset.json"))?;
    let dataset = SyntheticDataset::generate(&data_cfg)?;
    let profile: HardwareProfile = read_json(&opts.profile_path)?;
    let costs: CostTable = match &opts.costs_path {
        Some(p) => read_json(p)?,
        None => CostTable::default(),
    };
    let plan = select_compute_strategy(&profile, &costs, QuantMode::W4A6, StrategyRule::Standard)?;

    let arch = net.arch;
    let ranked = evolve(
        &space,
        &opts.evo,
        |config| net.subnet_accuracy(config, &dataset, Split::Val),
        |config| Ok(estimate_fps(config, &arch, &profile, &plan, None)?.fps),
    )?;

    let candidates = rank_candidates(&ranked, &arch, &profile, &plan)?;
    let results = SearchResults {
        target_fps: opts.evo.target_fps,
        seed: opts.evo.seed,
        population_size: opts.evo.population_size,
        generations: opts.evo.generations,
        candidates,
    };
    write_json(&opts.out_path, &results)?;
    RunManifest::new("search")
        .seed("seed", opts.evo.seed)
        .input(&opts.space_path)?
        .input(&opts.supernet_dir)?
        .input(&opts.profile_path)?
        .output(&opts.out_path)
        .write(&opts.out_path.with_extension("manifest.json"))?;
    Ok(results)
}

fn rank_candidates(
    ranked: &[Candidate],
    arch: &ModelArch,
    profile: &HardwareProfile,
    plan: &ComputePlan,
) -> Result<Vec<RankedCandidate>> {
    ranked
        .iter()
        .enumerate()
        .map(|(rank, c)| {
            let est = estimate_fps(&c.config, arch, profile, plan, None)?;
            let params = c.config.param_count(arch);
            let ratio = c.config.weighted_mixed_ratio();
            Ok(RankedCandidate {
                rank,
                config: c.config.clone(),
                fitness: c.fitness,
                fps: c.fps,
                total_cycles: est.total_cycles,
                param_count: params,
                model_size_mb: model_size_mb(params, ratio),
                bops_g: bops(c.config.macs(arch), ratio, 6) / 1e9,
                per_layer_cycles: est.layers,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// quantize

/// Quantizes a 2-D f32 QVT tensor row-wise: the first round(ratio*rows) rows
/// at 8 bits, the rest at 4.
pub fn run_quantize(input: &Path, ratio: f64, output: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig("ratio must be in [0,1]".into()));
    }
    let tensor = read_qvt(input)?.to_f64()?;
    let mat = tensor
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let tags = crate::vit::tags_for_rows(mat.nrows(), ratio);
    let q = quantize_rows(&mat, &tags, &QuantParams::default())?;
    write_qvt(output, &QvtTensor::from_quantized(&q))?;
    RunManifest::new("quantize")
        .input(input)?
        .output(output)
        .write(&output.with_extension("manifest.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export

pub struct ExportOptions {
    pub supernet_dir: PathBuf,
    pub config: SubnetConfig,
    pub profile_path: PathBuf,
    pub costs_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Materializes one subnet: its config, row-wise quantized GEMM weights,
/// full-precision auxiliaries, and a latency/resource estimate.
pub fn run_export(opts: &ExportOptions) -> Result<EstimateReport> {
    let net = Supernet::load(&opts.supernet_dir)?;
    let (params, _model_cfg) = net.extract(&opts.config, QuantKind::Full)?;
    std::fs::create_dir_all(&opts.out_dir)?;

    let qp = QuantParams::with_act_bits(net.act_bits)?;
    for (l, b) in params.blocks.iter().enumerate() {
        for (name, w, tags) in [
            ("w_qkv", &b.w_qkv, &b.tags_qkv),
            ("w_proj", &b.w_proj, &b.tags_proj),
            ("w_mlp1", &b.w_mlp1, &b.tags_mlp1),
            ("w_mlp2", &b.w_mlp2, &b.tags_mlp2),
        ] {
            let q = quantize_rows(w, tags, &qp)?;
            write_qvt(
                &opts.out_dir.join(format!("block{l}.{name}.qvt")),
                &QvtTensor::from_quantized(&q),
            )?;
        }
        for (name, v) in [
            ("ln1_gamma", &b.ln1.gamma),
            ("ln1_beta", &b.ln1.beta),
            ("ln2_gamma", &b.ln2.gamma),
            ("ln2_beta", &b.ln2.beta),
            ("sls_msa", &b.sls_msa),
            ("sls_mlp", &b.sls_mlp),
        ] {
            write_qvt(
                &opts.out_dir.join(format!("block{l}.{name}.qvt")),
                &QvtTensor::from_f64(v),
            )?;
        }
    }
    write_qvt(
        &opts.out_dir.join("patch_embed.qvt"),
        &QvtTensor::from_f64(&params.patch_embed),
    )?;
    write_qvt(&opts.out_dir.join("head.qvt"), &QvtTensor::from_f64(&params.head))?;

    let descriptor = ModelDescriptor {
        arch: net.arch,
        subnet: opts.config.clone(),
    };
    write_json(&opts.out_dir.join("config.json"), &descriptor)?;

    let profile: HardwareProfile = read_json(&opts.profile_path)?;
    let costs: CostTable = match &opts.costs_path {
        Some(p) => read_json(p)?,
        None => CostTable::default(),
    };
    let est_opts = EstimateOptions {
        act_bits: net.act_bits,
        ..EstimateOptions::default()
    };
    let report = run_estimate(&descriptor, &profile, &costs, &est_opts)?;
    write_json(&opts.out_dir.join("estimate.json"), &report)?;
    RunManifest::new("export")
        .input(&opts.supernet_dir)?
        .input(&opts.profile_path)?
        .output(&opts.out_dir)
        .write(&opts.out_dir.join("run.manifest.json"))?;

    Ok(report)
}

// ---------------------------------------------------------------------------
// shared sample assets

/// Writes the shipped sample configuration files into a directory.
pub fn write_sample_configs(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("toy_space.json"), &SearchSpace::toy())?;
    write_json(
        &dir.join("full_small_space.json"),
        &SearchSpace {
            embed_dims: vec![192, 216, 240],
            hidden_dims: vec![192, 256],
            mixed_ratios: vec![0.0, 0.25, 0.5],
            expansion_ratios: vec![3.5, 4.0],
            depths: vec![12, 13, 14],
        },
    )?;
    write_json(
        &dir.join("full_large_space.json"),
        &SearchSpace {
            embed_dims: vec![320, 384, 448],
            hidden_dims: vec![320, 384, 448],
            mixed_ratios: vec![0.0, 0.25, 0.5],
            expansion_ratios: vec![3.0, 3.5, 4.0],
            depths: vec![12, 13, 14],
        },
    )?;
    write_json(&dir.join("sample_profile.json"), &sample_profile())?;
    write_json(&dir.join("cost_table.json"), &CostTable::default())?;
    // A worked tiling fixture: with this profile the plan holds 64 parallel
    // multipliers, and the projection layer of the descriptor under the
    // shipped tiles costs exactly 18 cycles (l_in 8, l_wgt 4, l_out 8,
    // l_cmpt 2 -> L1 8, L2 10, total 18).
    write_json(&dir.join("example_profile.json"), &example_profile())?;
    write_json(&dir.join("example_descriptor.json"), &example_descriptor())?;
    write_json(&dir.join("example_tiles.json"), &example_tiles())?;
    Ok(())
}

pub fn example_profile() -> HardwareProfile {
    HardwareProfile {
        s_dsp: 100,
        s_lut: 700,
        gamma_dsp: 1.0,
        gamma_lut: 1.0,
        axi_in: 2,
        axi_wgt: 2,
        axi_out: 2,
        d_act: 2,
        d_wgt: 2,
        freq_hz: 150e6,
    }
}

pub fn example_descriptor() -> ModelDescriptor {
    ModelDescriptor {
        arch: ModelArch {
            token_dim: 16,
            tokens: 8,
            num_heads: 1,
            num_classes: 4,
        },
        subnet: SubnetConfig {
            embed_dim: 4,
            depth: 1,
            hidden_dims: vec![4],
            expansion_ratios: vec![1.0],
            mixed_ratios: vec![0.0],
        },
    }
}

pub fn example_tiles() -> Vec<TileConfig> {
    let block = TileConfig { t_n: 4, t_m: 4, p_f: 4 };
    let head = TileConfig { t_n: 4, t_m: 4, p_f: 1 };
    vec![block, block, block, block, block, block, head]
}

/// A representative embedded-class device profile (device totals are
/// user-supplied inputs, not published values).
pub fn sample_profile() -> HardwareProfile {
    HardwareProfile {
        s_dsp: 2520,
        s_lut: 274_080,
        gamma_dsp: 0.7,
        gamma_lut: 0.7,
        axi_in: 4,
        axi_wgt: 4,
        axi_out: 4,
        d_act: 8,
        d_wgt: 16,
        freq_hz: 150e6,
    }
}

/// Deterministic sample of a subnet from a space file, for fixtures.
pub fn sample_descriptor(space: &SearchSpace, arch: ModelArch, seed: u64) -> ModelDescriptor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelDescriptor {
        arch,
        subnet: sample_subnet(space, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_verify_reports_expected_cardinalities() {
        let out = run_pack_verify(PackVerifyMode::All, 2, false);
        assert!(out.ok);
        assert_eq!(out.lines.len(), 3);
        assert!(out.lines[0].starts_with("262144 pack3"));
        assert!(out.lines[1].starts_with("1048576 pack4"));
        assert!(out.lines[2].starts_with("16384 w8"));
    }

    #[test]
    fn pack_verify_w8_mode_only() {
        let out = run_pack_verify(PackVerifyMode::W8, 1, false);
        assert!(out.ok);
        assert_eq!(out.lines.len(), 1);
        assert!(out.lines[0].starts_with("16384"));
    }

    #[test]
    fn corrupted_lanes_fail_verification() {
        let out = run_pack_verify(PackVerifyMode::Pack3, 1, true);
        assert!(!out.ok);
        assert!(out.lines[0].contains("FAILED"));
    }

    #[test]
    fn estimate_on_sample_assets_is_consistent() {
        let space = SearchSpace::toy();
        let model = sample_descriptor(&space, ModelArch::default(), 3);
        let profile = sample_profile();
        let report = run_estimate(
            &model,
            &profile,
            &CostTable::default(),
            &EstimateOptions::default(),
        )
        .unwrap();
        assert!(report.fps > 0.0);
        assert!(report.total_cycles > 0);
        assert_eq!(
            report.layers.len(),
            model.subnet.depth * 6 + 1,
            "six GEMMs per block plus the head"
        );
        let table = format_estimate_table(&report);
        assert!(table.contains("total cycles"));
    }

    #[test]
    fn shipped_example_reproduces_the_worked_tiling() {
        let report = run_estimate(
            &example_descriptor(),
            &example_profile(),
            &CostTable::default(),
            &EstimateOptions {
                tiles: Some(example_tiles()),
                ..EstimateOptions::default()
            },
        )
        .unwrap();
        assert_eq!(report.plan.n_tot, 64);
        let proj = report
            .layers
            .iter()
            .find(|l| l.name == "block0.proj")
            .unwrap();
        assert_eq!(
            (proj.cycles.l_in, proj.cycles.l_wgt, proj.cycles.l_out, proj.cycles.l_cmpt),
            (8, 4, 8, 2)
        );
        assert_eq!(proj.l_tot, 18);
    }

    #[test]
    fn empty_model_config_is_rejected() {
        let mut model = example_descriptor();
        model.subnet.depth = 0;
        model.subnet.hidden_dims.clear();
        model.subnet.expansion_ratios.clear();
        model.subnet.mixed_ratios.clear();
        assert!(run_estimate(
            &model,
            &example_profile(),
            &CostTable::default(),
            &EstimateOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn quantize_round_trips_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("w.qvt");
        let output = dir.path().join("q.qvt");
        let w = ndarray::Array2::from_shape_fn((6, 5), |(i, j)| {
            ((i * 5 + j) as f64 * 0.37).sin()
        });
        write_qvt(&input, &QvtTensor::from_f64(&w)).unwrap();
        run_quantize(&input, 0.5, &output).unwrap();
        let q = read_qvt(&output).unwrap().to_quantized().unwrap();
        assert_eq!(q.mixed_ratio(), 0.5);
        let deq = crate::quant::dequantize(&q);
        for (i, (orig, rec)) in w.iter().zip(deq.iter()).enumerate() {
            let row = i / 5;
            let orig32 = *orig as f32 as f64;
            assert!((orig32 - rec).abs() <= q.row_scales[row] / 2.0 + 1e-6);
        }
    }
}
