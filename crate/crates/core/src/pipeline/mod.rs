//! End-to-end orchestration: stage runners over a checkpoint directory,
//! evaluation against direct transfer, and plot-data export.
//!
//! Every stage reads its inputs from the checkpoint directory and writes one
//! artifact tagged with the hash of the settings it depends on, so a stage
//! never silently consumes an artifact built under another configuration.

mod config;
mod eval;
mod store;

pub use config::{AdaptConfig, AdaptMode, AlignSchedule, DataConfig, LmShape, PipelineConfig, SubgraphConfig, Variant, CONFIG_VERSION};
pub use eval::{emit_plot_data, evaluate, pca_2d, AdaptedTarget, F1Row, MetricTable};
pub use store::{Envelope, Store, CHECKPOINT_VERSION, TIMING_FILE};

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};
use crate::gnn::{pretrain_source, GnnModel};
use crate::graph::{load_graph, sample_ego, save_graph, synth_shift, DomainPair, EgoSubgraph, Graph, GraphFormat};
use crate::grpo::{build_centroids, grpo_step, CentroidMatrix, GrpoStats};
use crate::lm::{generate, serialize_trajectory, train_sft, RestorerLm, SamplingConfig, TokenCorpus};
use crate::optim::Adam;
use crate::refine::{refine_target, refine_with, stitch, target_prompt, RewardModel};
use crate::rng::{derive, seeded};
use crate::tokenizer::{train_tokenizer, LossParts, TokenizerBundle, TokenizerLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    PretrainGnn,
    TrainTokenizer,
    MakeTrajectories,
    Sft,
    Grpo,
    Adapt,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::PretrainGnn,
        Stage::TrainTokenizer,
        Stage::MakeTrajectories,
        Stage::Sft,
        Stage::Grpo,
        Stage::Adapt,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainGnn => "pretrain-gnn",
            Stage::TrainTokenizer => "train-tokenizer",
            Stage::MakeTrajectories => "make-trajectories",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
        }
    }

    /// File the stage writes inside the checkpoint directory.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::PretrainGnn => "gnn.ckpt",
            Stage::TrainTokenizer => "tok.ckpt",
            Stage::MakeTrajectories => "corpus.ckpt",
            Stage::Sft => "lm_sft.ckpt",
            Stage::Grpo => "lm.ckpt",
            Stage::Adapt => "adapt.ckpt",
            Stage::Eval => REPORT_FILE,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown stage `{s}`")))
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const CENTROIDS_FILE: &str = "centroids.json";
pub const CORPUS_FILE: &str = "corpus.tok";
pub const ADAPTED_FILE: &str = "adapted.graph";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnnArtifact {
    pub model: GnnModel,
    pub loss: Vec<f64>,
    pub centroids: CentroidMatrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerArtifact {
    pub bundle: TokenizerBundle,
    pub log: TokenizerLog,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftArtifact {
    pub lm: RestorerLm,
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrpoArtifact {
    pub lm: RestorerLm,
    pub sigma: f64,
    pub curve: Vec<GrpoStats>,
    /// Mean reward of greedy refinements of the held-out nodes before and after alignment.
    pub heldout_before: f64,
    pub heldout_after: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptArtifact {
    pub mode: AdaptMode,
    /// Refined subgraph of every target node, in node order.
    pub refined: Vec<EgoSubgraph>,
    /// Nodes whose generation held no complete block and kept their input.
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub gnn: Vec<f64>,
    pub tokenizer: Vec<LossParts>,
    pub codebook_utilization: f64,
    pub sft: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub sigma: f64,
    pub mean_reward: Vec<f64>,
    pub mean_kl: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub variant: String,
    pub config_hash: String,
    pub adapt_mode: AdaptMode,
    pub losses: StageLosses,
    pub rewards: RewardCurve,
    pub fallbacks: usize,
    pub metrics: MetricTable,
    /// Seconds per stage; kept in a separate file so reports compare byte for byte.
    #[serde(skip)]
    pub timing: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn load(store: &Store) -> Result<Self> {
        let env: Envelope<RunReport> = serde_json::from_slice(&std::fs::read(store.path(REPORT_FILE))?)?;
        let mut r = env.payload;
        r.timing = store.timing()?;
        Ok(r)
    }
}

/// How `run_pipeline` treats existing checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Run every stage.
    Fresh,
    /// Skip stages whose checkpoint matches the configuration.
    Resume,
    /// Run this stage and everything after it on top of existing upstream checkpoints.
    From(Stage),
}

/// Runs the stages in order and returns the report.
pub fn run_pipeline(cfg: &PipelineConfig, store: &Store, mode: RunMode) -> Result<RunReport> {
    cfg.validate()?;
    for stage in Stage::ALL {
        let skip = match mode {
            RunMode::Fresh => false,
            RunMode::Resume => store.recorded_hash(stage)?.as_deref() == Some(cfg.stage_hash(stage).as_str()),
            RunMode::From(first) => stage < first,
        };
        if skip {
            info!("{}: up to date", stage.name());
            continue;
        }
        run_stage(stage, cfg, store)?;
    }
    RunReport::load(store)
}

/// Runs one stage against the checkpoints already in `store`.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, store: &Store) -> Result<()> {
    cfg.validate()?;
    let start = Instant::now();
    info!("{}: running", stage.name());
    match stage {
        Stage::PretrainGnn => stage_pretrain(cfg, store)?,
        Stage::TrainTokenizer => stage_tokenizer(cfg, store)?,
        Stage::MakeTrajectories => stage_trajectories(cfg, store)?,
        Stage::Sft => stage_sft(cfg, store)?,
        Stage::Grpo => stage_grpo(cfg, store)?,
        Stage::Adapt => stage_adapt(cfg, store)?,
        Stage::Eval => stage_eval(cfg, store)?,
    }
    let secs = start.elapsed().as_secs_f64();
    info!("{}: done in {secs:.1}s", stage.name());
    store.record_time(stage, secs)
}

fn graph_format(path: &Path) -> GraphFormat {
    if path.is_dir() {
        GraphFormat::Directory
    } else {
        GraphFormat::Container
    }
}

/// Source and target graphs named by the configuration.
pub fn load_domains(cfg: &PipelineConfig) -> Result<DomainPair> {
    let c = cfg.resolved();
    match (&c.data.source, &c.data.target) {
        (Some(s), Some(t)) => DomainPair::new(load_graph(s, graph_format(s))?, load_graph(t, graph_format(t))?),
        _ => synth_shift(&c.data.synthetic),
    }
}

/// Ego subgraphs of a seeded choice of source nodes used for tokenizer training.
pub fn source_subgraphs(cfg: &PipelineConfig, g: &Graph) -> Result<Vec<EgoSubgraph>> {
    let mut centers: Vec<usize> = (0..g.node_count()).collect();
    centers.shuffle(&mut seeded(cfg.stage_seed(1)));
    centers.truncate(cfg.subgraph.train_count);
    let seed = cfg.stage_seed(2);
    centers
        .into_iter()
        .map(|u| sample_ego(g, u, cfg.subgraph.hops, cfg.subgraph.max_nodes, derive(seed, u as u64)))
        .collect()
}

/// Ego subgraph of every target node, in node order.
pub fn target_subgraphs(cfg: &PipelineConfig, g: &Graph) -> Result<Vec<EgoSubgraph>> {
    let seed = cfg.stage_seed(3);
    (0..g.node_count())
        .map(|u| sample_ego(g, u, cfg.subgraph.hops, cfg.subgraph.max_nodes, derive(seed, u as u64)))
        .collect()
}

fn load_gnn(cfg: &PipelineConfig, store: &Store, consumer: Stage) -> Result<GnnArtifact> {
    store.load(Stage::PretrainGnn, &cfg.stage_hash(Stage::PretrainGnn), consumer)
}

fn load_tokenizer(cfg: &PipelineConfig, store: &Store, consumer: Stage) -> Result<TokenizerArtifact> {
    store.load(Stage::TrainTokenizer, &cfg.stage_hash(Stage::TrainTokenizer), consumer)
}

fn stage_pretrain(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let pair = load_domains(cfg)?;
    let (model, loss) = pretrain_source(&pair.source, &c.gnn)?;
    let h = model.embed(&pair.source)?;
    let labels = pair.source.labels().expect("source labels checked");
    let centroids = build_centroids(&h, labels, pair.source.num_classes())?;
    centroids.save(&store.path(CENTROIDS_FILE))?;
    info!("gnn: final training loss {:.4}", loss.last().copied().unwrap_or(f64::NAN));
    store.save(Stage::PretrainGnn, &cfg.stage_hash(Stage::PretrainGnn), &GnnArtifact { model, loss, centroids })
}

fn stage_tokenizer(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let gnn = load_gnn(cfg, store, Stage::TrainTokenizer)?;
    let pair = load_domains(cfg)?;
    let subs = source_subgraphs(&c, &pair.source)?;
    let (bundle, log) = train_tokenizer(&subs, &gnn.model, &c.tokenizer)?;
    info!("tokenizer: codebook utilization {:.3}", log.utilization);
    store.save(Stage::TrainTokenizer, &cfg.stage_hash(Stage::TrainTokenizer), &TokenizerArtifact { bundle, log })
}

fn stage_trajectories(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let gnn = load_gnn(cfg, store, Stage::MakeTrajectories)?;
    let tok = load_tokenizer(cfg, store, Stage::MakeTrajectories)?;
    let pair = load_domains(cfg)?;
    let subs = source_subgraphs(&c, &pair.source)?;
    let seed = c.stage_seed(4);
    let mut seqs = Vec::with_capacity(subs.len());
    for (i, sub) in subs.iter().enumerate() {
        let grids = tok.bundle.trajectory_tokens(sub, &gnn.model, derive(seed, i as u64))?;
        seqs.push(serialize_trajectory(&grids)?);
    }
    let corpus = TokenCorpus::new(c.tokenizer.num_queries, c.tokenizer.steps, c.tokenizer.codebook_size, seqs)?;
    corpus.save(&store.path(CORPUS_FILE))?;
    store.save(Stage::MakeTrajectories, &cfg.stage_hash(Stage::MakeTrajectories), &corpus)
}

fn stage_sft(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let corpus: TokenCorpus =
        store.load(Stage::MakeTrajectories, &cfg.stage_hash(Stage::MakeTrajectories), Stage::Sft)?;
    let mut lm = RestorerLm::new(c.lm_config())?;
    let loss = train_sft(&mut lm, &corpus, &c.sft)?;
    store.save(Stage::Sft, &cfg.stage_hash(Stage::Sft), &SftArtifact { lm, loss })
}

fn greedy() -> SamplingConfig {
    SamplingConfig { temperature: 0.0, top_k: None, seed: 0 }
}

fn mean_reward(reward: &RewardModel, refined: &[EgoSubgraph]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in refined {
        if let Some(p) = reward.score(r)? {
            sum += p.total;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn stage_grpo(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let gnn = load_gnn(cfg, store, Stage::Grpo)?;
    let tok = load_tokenizer(cfg, store, Stage::Grpo)?;
    let SftArtifact { mut lm, .. } = store.load(Stage::Sft, &cfg.stage_hash(Stage::Sft), Stage::Grpo)?;
    let pair = load_domains(cfg)?;
    let subs = target_subgraphs(&c, &pair.target)?;
    let bundle = &tok.bundle;
    let steps = c.tokenizer.steps;

    let mut order: Vec<usize> = (0..subs.len()).collect();
    order.shuffle(&mut seeded(c.stage_seed(5)));
    let hold = c.align.holdout.min(subs.len().saturating_sub(1));
    let (holdout, pool) = order.split_at(hold);
    ensure!(!pool.is_empty(), "no target nodes left for GRPO prompts");

    let refine_all = |lm: &RestorerLm, nodes: &[usize]| -> Result<Vec<EgoSubgraph>> {
        nodes.iter().map(|&u| refine_target(&subs[u], bundle, lm, &gnn.model, &greedy(), steps)).collect()
    };
    let mut reward = RewardModel::new(&gnn.model, &gnn.centroids, c.reward.clone())?;
    let pilot = if holdout.is_empty() { refine_all(&lm, &pool[..pool.len().min(16)])? } else { refine_all(&lm, holdout)? };
    let sigma = reward.calibrate(&pilot)?;
    let heldout_before = mean_reward(&reward, &pilot)?;
    info!("grpo: kernel bandwidth {sigma:.4}, held-out reward {heldout_before:.4}");

    let mut opt = Adam::new(lm.params(), c.grpo.lr);
    let mut curve = Vec::with_capacity(c.align.steps);
    let mut prompt_cache: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in 0..c.align.steps {
        let mut pick = pool.to_vec();
        pick.shuffle(&mut seeded(derive(c.stage_seed(6), s as u64)));
        pick.truncate(c.align.prompts_per_step);
        let mut prompts = Vec::with_capacity(pick.len());
        for &u in &pick {
            if !prompt_cache.contains_key(&u) {
                prompt_cache.insert(u, target_prompt(&subs[u], bundle, &gnn.model)?);
            }
            prompts.push(prompt_cache[&u].clone());
        }
        let mut scorer = |p: usize, g: &crate::lm::Generation| -> Result<Option<f64>> {
            match refine_with(&subs[pick[p]], g, bundle)? {
                Some(r) => Ok(reward.score(&r)?.map(|parts| parts.total)),
                None => Ok(None),
            }
        };
        let stats = grpo_step(&mut lm, &mut opt, &prompts, steps, &mut scorer, &c.grpo, derive(c.stage_seed(7), s as u64))?;
        info!("grpo step {s}: reward {:.4} kl {:.2e} scale {}", stats.mean_reward, stats.mean_kl, stats.step_scale);
        curve.push(stats);
    }
    let after = if holdout.is_empty() { refine_all(&lm, &pool[..pool.len().min(16)])? } else { refine_all(&lm, holdout)? };
    let heldout_after = mean_reward(&reward, &after)?;
    info!("grpo: held-out reward {heldout_before:.4} -> {heldout_after:.4}");
    store.save(Stage::Grpo, &cfg.stage_hash(Stage::Grpo), &GrpoArtifact { lm, sigma, curve, heldout_before, heldout_after })
}

fn stage_adapt(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let gnn = load_gnn(cfg, store, Stage::Adapt)?;
    let tok = load_tokenizer(cfg, store, Stage::Adapt)?;
    let aligned: GrpoArtifact = store.load(Stage::Grpo, &cfg.stage_hash(Stage::Grpo), Stage::Adapt)?;
    let pair = load_domains(cfg)?;
    let subs = target_subgraphs(&c, &pair.target)?;
    let seed = c.stage_seed(8);
    let mut refined = Vec::with_capacity(subs.len());
    let mut fallbacks = 0;
    for sub in &subs {
        let prompt = target_prompt(sub, &tok.bundle, &gnn.model)?;
        let sampling = SamplingConfig { temperature: c.adapt.temperature, top_k: None, seed: derive(seed, sub.center() as u64) };
        let g = generate(&aligned.lm, &prompt, &sampling, c.tokenizer.steps)?;
        match refine_with(sub, &g, &tok.bundle)? {
            Some(r) => refined.push(r),
            None => {
                warn!("no complete block generated for node {}; keeping the input subgraph", sub.center());
                fallbacks += 1;
                refined.push(sub.clone());
            }
        }
    }
    let stitched = stitch(&pair.target, &refined)?;
    save_graph(&stitched, &store.path(ADAPTED_FILE), GraphFormat::Container)?;
    store.save(Stage::Adapt, &cfg.stage_hash(Stage::Adapt), &AdaptArtifact { mode: c.adapt.mode, refined, fallbacks })
}

/// The refined target in the form the configured evaluation mode classifies.
pub fn adapted_target(art: &AdaptArtifact, target: &Graph) -> Result<AdaptedTarget> {
    Ok(match art.mode {
        AdaptMode::CenterOnly => AdaptedTarget::Centers(art.refined.clone()),
        AdaptMode::Stitch => AdaptedTarget::Stitched(stitch(target, &art.refined)?),
    })
}

fn stage_eval(cfg: &PipelineConfig, store: &Store) -> Result<()> {
    let c = cfg.resolved();
    let gnn = load_gnn(cfg, store, Stage::Eval)?;
    let tok = load_tokenizer(cfg, store, Stage::Eval)?;
    let sft: SftArtifact = store.load(Stage::Sft, &cfg.stage_hash(Stage::Sft), Stage::Eval)?;
    let aligned: GrpoArtifact = store.load(Stage::Grpo, &cfg.stage_hash(Stage::Grpo), Stage::Eval)?;
    let adapted: AdaptArtifact = store.load(Stage::Adapt, &cfg.stage_hash(Stage::Adapt), Stage::Eval)?;
    let pair = load_domains(cfg)?;
    let labels = pair
        .target
        .labels()
        .ok_or_else(|| Error::contract("evaluation needs target labels"))?
        .to_vec();
    let metrics = evaluate(&gnn.model, &pair.target, &adapted_target(&adapted, &pair.target)?, &labels)?;
    info!("eval:\n{}", metrics.render());
    let report = RunReport {
        version: CHECKPOINT_VERSION,
        variant: c.variant.label().into(),
        config_hash: cfg.hash(),
        adapt_mode: adapted.mode,
        losses: StageLosses {
            gnn: gnn.loss,
            tokenizer: tok.log.epochs,
            codebook_utilization: tok.log.utilization,
            sft: sft.loss,
        },
        rewards: RewardCurve {
            sigma: aligned.sigma,
            mean_reward: aligned.curve.iter().map(|s| s.mean_reward).collect(),
            mean_kl: aligned.curve.iter().map(|s| s.mean_kl).collect(),
            heldout_before: aligned.heldout_before,
            heldout_after: aligned.heldout_after,
        },
        fallbacks: adapted.fallbacks,
        metrics,
        timing: BTreeMap::new(),
    };
    let env = Envelope { kind: Stage::Eval.name().into(), version: CHECKPOINT_VERSION, config_hash: cfg.stage_hash(Stage::Eval), payload: &report };
    store::write_atomic(&store.path(REPORT_FILE), &serde_json::to_vec_pretty(&env)?)
}

/// Writes PCA coordinates of source, raw target, and adapted target embeddings.
pub fn emit_plot(cfg: &PipelineConfig, store: &Store, out: &Path) -> Result<()> {
    let gnn = load_gnn(cfg, store, Stage::Eval)?;
    let adapted: AdaptArtifact = store.load(Stage::Adapt, &cfg.stage_hash(Stage::Adapt), Stage::Eval)?;
    let pair = load_domains(cfg)?;
    let stitched = stitch(&pair.target, &adapted.refined)?;
    let target_labels = match pair.target.labels() {
        Some(l) => l.to_vec(),
        None => gnn.model.predict(&pair.target)?.argmax(),
    };
    let parts: [(&Graph, &[usize], &str); 3] = [
        (&pair.source, pair.source.labels().expect("labeled source"), "source"),
        (&pair.target, &target_labels, "target"),
        (&stitched, &target_labels, "adapted"),
    ];
    let mut rows: Vec<Mat> = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for (g, l, name) in parts {
        rows.push(gnn.model.embed(g)?);
        labels.extend_from_slice(l);
        domains.extend(std::iter::repeat_n(name.to_string(), g.node_count()));
    }
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::dim(e.to_string()))?;
    emit_plot_data(&all, &labels, &domains, out)
}
