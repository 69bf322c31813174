//! End-to-end training and evaluation: the full forward pass
//! (structure encoder → modality projections → diffusion → fusion),
//! the Adam training loop, ranking metrics, ablation drivers, and
//! low-resource seed sweeps.

pub mod config;
pub mod model;
pub mod selftest;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diffusion::diffuse;
use crate::encoders::{project_modality, rrgat_encode, ModalityProjection, RRGATGraph, RRGATParams};
use crate::fusion::{
    fuse_joint, modality_rows, modality_weight_tensor, stack_tokens, transformer_block,
    fusion_params_from,
};
use crate::kgdata::{
    build_adjacency, split_seeds, DataError, MultiModalKG, NormalizedAdjacency, SeedAlignments,
};
use crate::matrix::Matrix;
use crate::objective::{
    gram_loss, infonce_loss, similarity_matrix, topk_candidates, total_loss, GramBatch, LossConfig,
};
use crate::tensor::{Tape, Tensor};

pub use config::{FusionConfig, TrainConfig};
pub use model::{Adam, ModelParams, RRGAT_LAYERS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {term}")]
    Diverged {
        epoch: usize,
        batch: usize,
        term: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Ablation variants: modality removals zero the modality's token and
/// its ω weight; `NoMgd` bypasses diffusion; `NoGram` drops the Gram
/// term from the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoRelation,
    NoAttribute,
    NoImage,
    NoMgd,
    NoGram,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoRelation,
        Variant::NoAttribute,
        Variant::NoImage,
        Variant::NoMgd,
        Variant::NoGram,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRelation => "no_relation",
            Variant::NoAttribute => "no_attribute",
            Variant::NoImage => "no_image",
            Variant::NoMgd => "no_mgd",
            Variant::NoGram => "no_gram",
        }
    }

    /// Index of the zeroed modality token (r=1, a=2, v=3), if any.
    fn masked_modality(&self) -> Option<usize> {
        match self {
            Variant::NoRelation => Some(1),
            Variant::NoAttribute => Some(2),
            Variant::NoImage => Some(3),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Variant, PipelineError> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| PipelineError::Invalid(format!("unknown ablation variant {s:?}")))
    }
}

/// A graph pair with its derived static structures: normalized
/// adjacencies for diffusion and edge lists for the structure encoder.
pub struct PreparedData {
    pub kg1: MultiModalKG,
    pub kg2: MultiModalKG,
    pub seeds: SeedAlignments,
    pub adj1: NormalizedAdjacency,
    pub adj2: NormalizedAdjacency,
    pub graph1: RRGATGraph,
    pub graph2: RRGATGraph,
}

impl PreparedData {
    pub fn new(
        kg1: MultiModalKG,
        kg2: MultiModalKG,
        seeds: SeedAlignments,
    ) -> Result<PreparedData, PipelineError> {
        kg1.validate()?;
        kg2.validate()?;
        seeds.validate()?;
        for &(l, r) in &seeds.pairs {
            if l >= kg1.entity_count || r >= kg2.entity_count {
                return Err(PipelineError::Invalid(format!(
                    "alignment pair ({l},{r}) out of range"
                )));
            }
        }
        if kg1.rel_features.cols != kg2.rel_features.cols
            || kg1.attr_features.cols != kg2.attr_features.cols
            || kg1.visual_features.cols != kg2.visual_features.cols
        {
            return Err(PipelineError::Invalid(
                "the two graphs must share feature dimensions".into(),
            ));
        }
        let adj1 = build_adjacency(&kg1);
        let adj2 = build_adjacency(&kg2);
        let graph1 = RRGATGraph::new(&kg1);
        let graph2 = RRGATGraph::new(&kg2);
        Ok(PreparedData {
            kg1,
            kg2,
            seeds,
            adj1,
            adj2,
            graph1,
            graph2,
        })
    }

    /// Same graphs under a different alignment split.
    pub fn with_seeds(&self, seeds: SeedAlignments) -> Result<PreparedData, PipelineError> {
        PreparedData::new(self.kg1.clone(), self.kg2.clone(), seeds)
    }
}

/// Everything the losses and the evaluator need from one forward pass.
pub struct ForwardOutputs {
    /// Row-normalized joint embeddings `H_o` per graph.
    pub joint1: Tensor,
    pub joint2: Tensor,
    /// Source-graph structure embeddings (candidate-selection queries).
    pub h_g1: Tensor,
    /// Masked modality weights `ω`, `1 × 4`.
    pub weights: Tensor,
    /// Target-graph post-fusion hidden states per modality.
    pub tgt_rel: Tensor,
    pub tgt_attr: Tensor,
    pub tgt_vis: Tensor,
}

/// One forward pass over both graphs. The transformer runs on the
/// concatenated token stacks so the modality weights average over
/// every entity of both graphs.
pub fn forward(
    tensors: &BTreeMap<String, Tensor>,
    data: &PreparedData,
    cfg: &TrainConfig,
    variant: Variant,
    train: bool,
    rng: &mut impl Rng,
) -> ForwardOutputs {
    let lookup = |name: &str| -> Tensor {
        tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone()
    };
    let tape = lookup("rrgat.omega").tape().clone();
    let proj = |name: &str| ModalityProjection {
        w: lookup(&format!("proj.{name}.w")),
        b: lookup(&format!("proj.{name}.b")),
    };

    let mut h_gs = Vec::with_capacity(2);
    let mut token_stacks = Vec::with_capacity(2);
    for (g, kg, graph, adj) in [
        ("g1", &data.kg1, &data.graph1, &data.adj1),
        ("g2", &data.kg2, &data.graph2, &data.adj2),
    ] {
        let rrgat = RRGATParams {
            x_g: lookup(&format!("{g}.x_g")),
            omega: lookup("rrgat.omega"),
            rel_vecs: lookup(&format!("{g}.rel_vecs")),
            w_out: lookup("rrgat.w_out"),
            layer_count: RRGAT_LAYERS,
        };
        let h_g = rrgat_encode(&rrgat, graph);
        let mut modal = [
            project_modality(&proj("rel"), &tape.constant(kg.rel_features.clone())),
            project_modality(&proj("attr"), &tape.constant(kg.attr_features.clone())),
            project_modality(&proj("vis"), &tape.constant(kg.visual_features.clone())),
        ];
        if variant != Variant::NoMgd {
            for h in modal.iter_mut() {
                *h = diffuse(h, adj, &cfg.diffusion, train, rng);
            }
        }
        if let Some(m) = variant.masked_modality() {
            modal[m - 1] = modal[m - 1].scale(0.0);
        }
        let [h_r, h_a, h_v] = modal;
        token_stacks.push(stack_tokens(&h_g, &h_r, &h_a, &h_v));
        h_gs.push(h_g);
    }

    let tokens = Tensor::concat_rows(&token_stacks);
    let fusion = fusion_params_from(&lookup, cfg.fusion.heads);
    let (hidden, attns) = transformer_block(&tokens, &fusion);
    let mut weights = modality_weight_tensor(&attns, cfg.fusion.weight_mode);
    if let Some(m) = variant.masked_modality() {
        let mut mask = Matrix::filled(1, 4, 1.0);
        mask.set(0, m, 0.0);
        weights = weights.hadamard(&tape.constant(mask));
    }

    let n1 = data.kg1.entity_count;
    let n2 = data.kg2.entity_count;
    let rows1: Vec<usize> = (0..4 * n1).collect();
    let rows2: Vec<usize> = (4 * n1..4 * (n1 + n2)).collect();
    let hidden1 = hidden.gather_rows(&rows1);
    let hidden2 = hidden.gather_rows(&rows2);
    let joint1 = fuse_joint(&h_gs[0], &hidden1, &weights);
    let joint2 = fuse_joint(&h_gs[1], &hidden2, &weights);

    ForwardOutputs {
        joint1,
        joint2,
        h_g1: h_gs[0].clone(),
        weights,
        tgt_rel: modality_rows(&hidden2, 1),
        tgt_attr: modality_rows(&hidden2, 2),
        tgt_vis: modality_rows(&hidden2, 3),
    }
}

/// The per-batch objective, kept as separate terms for diagnostics.
pub struct LossTerms {
    pub total: Tensor,
    pub infonce: Tensor,
    /// Recorded 0 when the Gram term is disabled.
    pub gram: Tensor,
}

/// InfoNCE on the batch joints plus, when enabled, the Gram term over
/// top-K candidates selected by structural-visual similarity (values,
/// not recorded — candidate selection is a discrete choice).
pub fn batch_loss(
    out: &ForwardOutputs,
    lefts: &[usize],
    rights: &[usize],
    cfg: &LossConfig,
    use_gram: bool,
) -> LossTerms {
    let j1 = out.joint1.gather_rows(lefts);
    let j2 = out.joint2.gather_rows(rights);
    let infonce = infonce_loss(&j1, &j2, cfg);
    let tape = infonce.tape().clone();
    if !use_gram {
        return LossTerms {
            total: infonce.clone(),
            infonce,
            gram: tape.scalar(0.0),
        };
    }
    let src = out.h_g1.gather_rows(lefts);
    let sim = similarity_matrix(&src.value(), &out.tgt_vis.value());
    let k = cfg.topk.min(sim.cols).max(2);
    let batch = GramBatch {
        src_struct: src,
        tgt_vis: out.tgt_vis.clone(),
        tgt_attr: out.tgt_attr.clone(),
        tgt_rel: out.tgt_rel.clone(),
        topk_idx: topk_candidates(&sim, k),
        target: rights.to_vec(),
    };
    let gram = gram_loss(&batch, cfg);
    let total = total_loss(&infonce, &gram, cfg.lambda);
    LossTerms {
        total,
        infonce,
        gram,
    }
}

pub struct TrainedModel {
    pub params: ModelParams,
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
}

fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        items.swap(i, rng.gen_range(0..=i));
    }
}

/// Batches of at least 2 pairs: a trailing singleton is folded into
/// the previous batch.
fn batch_ranges(total: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + batch_size).min(total);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 && out.last().unwrap().1 - out.last().unwrap().0 < 2 {
        let (_, end) = out.pop().unwrap();
        out.last_mut().unwrap().1 = end;
    }
    out
}

pub fn train(
    data: &PreparedData,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainedModel, PipelineError> {
    cfg.validate()?;
    let mut pairs = data.seeds.train_pairs();
    if pairs.is_empty() {
        return Err(PipelineError::Invalid("no training seed pairs".into()));
    }
    if pairs.len() < 2 {
        return Err(PipelineError::Invalid(
            "need at least 2 training pairs for in-batch negatives".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&data.kg1, &data.kg2, cfg, &mut rng);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let use_gram = variant != Variant::NoGram && cfg.loss.lambda != 0.0;

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut pairs, &mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, &(start, end)) in batch_ranges(pairs.len(), cfg.batch_size).iter().enumerate()
        {
            let lefts: Vec<usize> = pairs[start..end].iter().map(|p| p.0).collect();
            let rights: Vec<usize> = pairs[start..end].iter().map(|p| p.1).collect();

            let tape = Tape::new();
            let tensors = params.register(&tape);
            let out = forward(&tensors, data, cfg, variant, true, &mut rng);
            let terms = batch_loss(&out, &lefts, &rights, &cfg.loss, use_gram);
            let total = terms.total.scalar_value();
            if !total.is_finite() {
                let term = if !terms.infonce.scalar_value().is_finite() {
                    "InfoNCE term"
                } else if !terms.gram.scalar_value().is_finite() {
                    "Gram term"
                } else {
                    "combined loss"
                };
                return Err(PipelineError::Diverged {
                    epoch,
                    batch: batch_no,
                    term: term.into(),
                });
            }
            epoch_loss += total * (end - start) as f64;

            terms.total.backward();
            let grads: Vec<Matrix> = params
                .entries
                .iter()
                .map(|(name, _)| {
                    tensors[name]
                        .grad()
                        .unwrap_or_else(|| panic!("parameter {name} received no gradient"))
                })
                .collect();
            adam.step(&mut params, &grads);
            for g in ["g1.rel_vecs", "g2.rel_vecs"] {
                let rv = params.get_mut(g);
                *rv = rv.l2_normalize_rows();
            }
        }
        history.push(epoch_loss / pairs.len() as f64);
    }
    Ok(TrainedModel {
        params,
        loss_history: history,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingReport {
    pub hits1: f64,
    pub hits10: f64,
    pub mrr: f64,
    #[serde(rename = "ranks")]
    pub per_query_rank: Vec<usize>,
}

impl RankingReport {
    pub fn from_ranks(per_query_rank: Vec<usize>) -> RankingReport {
        assert!(!per_query_rank.is_empty(), "metrics need at least one query");
        assert!(per_query_rank.iter().all(|&r| r >= 1));
        let n = per_query_rank.len() as f64;
        let hits = |k: usize| per_query_rank.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mrr = per_query_rank.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        RankingReport {
            hits1: hits(1),
            hits10: hits(10),
            mrr,
            per_query_rank,
        }
    }
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("MYGRAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

/// Pessimistic cosine ranks: for each (query, target) pair, the true
/// target is placed after every candidate scoring ≥ its own score.
pub fn rank_queries(src: &Matrix, tgt: &Matrix, pairs: &[(usize, usize)]) -> Vec<usize> {
    let queries: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let q = Matrix::from_vec(
        queries.len(),
        src.cols,
        queries.iter().flat_map(|&i| src.row(i).to_vec()).collect(),
    );
    let sim = similarity_matrix(&q, tgt);
    let mut ranks = vec![0usize; pairs.len()];
    let workers = worker_count(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (slot, work) in ranks.chunks_mut(chunk).zip(pairs.chunks(chunk)).enumerate() {
            let (out, pairs_chunk) = work;
            let sim = &sim;
            scope.spawn(move || {
                for (j, (r, &(_, target))) in out.iter_mut().zip(pairs_chunk).enumerate() {
                    let row = sim.row(slot * chunk + j);
                    let s = row[target];
                    let better = row.iter().filter(|&&x| x > s).count();
                    let ties = row
                        .iter()
                        .enumerate()
                        .filter(|&(i, &x)| i != target && x == s)
                        .count();
                    *r = 1 + better + ties;
                }
            });
        }
    });
    ranks
}

pub fn evaluate(
    params: &ModelParams,
    data: &PreparedData,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<RankingReport, PipelineError> {
    let test = data.seeds.test_pairs();
    if test.is_empty() {
        return Err(PipelineError::Invalid("no test seed pairs".into()));
    }
    let tape = Tape::new();
    let tensors = params.register(&tape);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let out = forward(&tensors, data, cfg, variant, false, &mut rng);
    let ranks = rank_queries(&out.joint1.value(), &out.joint2.value(), &test);
    Ok(RankingReport::from_ranks(ranks))
}

/// Train and evaluate one ablation variant under the same budget.
pub fn ablate(
    data: &PreparedData,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<(TrainedModel, RankingReport), PipelineError> {
    let model = train(data, cfg, variant)?;
    let report = evaluate(&model.params, data, cfg, variant)?;
    Ok((model, report))
}

/// Retrain from scratch at each seed ratio; reports in input order.
pub fn seed_sweep(
    data: &PreparedData,
    cfg: &TrainConfig,
    ratios: &[f64],
) -> Result<Vec<(f64, RankingReport)>, PipelineError> {
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let seeds = split_seeds(&data.seeds.pairs, ratio, cfg.seed)?;
        let resplit = data.with_seeds(seeds)?;
        let model = train(&resplit, cfg, Variant::Full)?;
        let report = evaluate(&model.params, &resplit, cfg, Variant::Full)?;
        out.push((ratio, report));
    }
    Ok(out)
}
