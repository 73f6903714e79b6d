//! Decoder-only transformer over graph tokens: trajectory serialization, the
//! token corpus file, supervised training, and block-constrained generation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, softmax_rows, Mat, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    attention, init_attention, init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp, Activation, Bound,
    ParamSet,
};
use crate::optim::Adam;
use crate::rng::{derive, normal_mat, seeded};
use crate::tokenizer::TokenGrid;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
/// Number of special ids preceding the graph tokens.
pub const SPECIALS: usize = 3;

/// Vocabulary id of codebook entry `s`.
pub fn graph_token(s: usize) -> usize {
    s + SPECIALS
}

/// Codebook entry of a vocabulary id, `None` for specials.
pub fn codebook_index(id: usize) -> Option<usize> {
    id.checked_sub(SPECIALS)
}

/// Serialized length of a trajectory with `steps + 1` blocks of `k` tokens.
pub fn sequence_len(k: usize, steps: usize) -> usize {
    (steps + 1) * k + steps + 2
}

/// `BOS, S_T, SEP, …, SEP, S_0, EOS` with graph ids offset past the specials.
pub fn serialize_trajectory(grids: &[TokenGrid]) -> Result<Vec<usize>> {
    ensure!(!grids.is_empty(), "trajectory has no blocks");
    let k = grids[0].len();
    ensure!(k >= 1, "blocks must hold at least one token");
    let mut out = Vec::with_capacity(grids.len() * (k + 1) + 1);
    out.push(BOS);
    for (i, g) in grids.iter().enumerate() {
        ensure!(g.len() == k, "ragged trajectory: block {i} has {} tokens, expected {k}", g.len());
        if i > 0 {
            out.push(SEP);
        }
        out.extend(g.tokens.iter().map(|&s| graph_token(s)));
    }
    out.push(EOS);
    Ok(out)
}

/// Splits a serialized sequence back into codebook-index blocks of length `k`.
pub fn deserialize_trajectory(seq: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(seq.len() >= 2 && seq[0] == BOS && seq[seq.len() - 1] == EOS, "sequence must be framed by BOS and EOS");
    let mut blocks = Vec::new();
    for part in seq[1..seq.len() - 1].split(|&t| t == SEP) {
        ensure!(part.len() == k, "block of {} tokens, expected {k}", part.len());
        let block = part
            .iter()
            .map(|&t| match t {
                BOS | EOS | SEP => Err(Error::contract(format!("special token {t} inside a block"))),
                _ => Ok(t - SPECIALS),
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(block);
    }
    Ok(blocks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub codebook_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest sequence the position table covers.
    pub context: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { codebook_size: 128, width: 128, layers: 4, heads: 4, context: sequence_len(128, 10), seed: 0 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.codebook_size >= 1, "codebook size must be positive");
        ensure!(self.layers >= 1 && self.heads >= 1, "need at least one layer and head");
        ensure!(self.width % self.heads == 0, "width {} not divisible by {} heads", self.width, self.heads);
        ensure!(self.context >= 2, "context must hold at least two tokens");
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook_size + SPECIALS
    }
}

/// Pre-norm causal transformer with learned positions and an untied output head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerLm {
    pub config: LmConfig,
    pub(crate) params: ParamSet,
}

const NEG: f64 = -1e9;

fn causal_mask(n: usize) -> Mat {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { NEG } else { 0.0 })
}

impl RestorerLm {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let d = config.width;
        let mut params = ParamSet::new();
        params.insert("lm.tok", normal_mat(&mut rng, config.vocab_size(), d, 0.1));
        params.insert("lm.pos", normal_mat(&mut rng, config.context, d, 0.1));
        for l in 0..config.layers {
            init_layer_norm(&mut params, &format!("lm.{l}.ln1"), d);
            init_attention(&mut params, &format!("lm.{l}.attn"), d, &mut rng);
            init_layer_norm(&mut params, &format!("lm.{l}.ln2"), d);
            init_mlp(&mut params, &format!("lm.{l}.mlp"), (d, 4 * d, d), &mut rng);
        }
        init_layer_norm(&mut params, "lm.lnf", d);
        init_linear(&mut params, "lm.head", d, config.vocab_size(), &mut rng);
        Ok(RestorerLm { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        ensure!(!tokens.is_empty(), "empty token sequence");
        ensure!(
            tokens.len() <= self.config.context,
            "sequence of {} tokens exceeds context {}",
            tokens.len(),
            self.config.context
        );
        let v = self.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Next-token logits for every position (`n×V`).
    pub(crate) fn forward(&self, t: &mut Tape, b: &Bound, tokens: &[usize]) -> Var {
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let tok = t.gather_rows(b.get("lm.tok"), tokens);
        let pos = t.gather_rows(b.get("lm.pos"), &positions);
        let mut x = t.add(tok, pos);
        let mask = t.constant(causal_mask(n));
        for l in 0..self.config.layers {
            let h = layer_norm(t, b, &format!("lm.{l}.ln1"), x);
            let a = attention(t, b, &format!("lm.{l}.attn"), h, h, self.config.heads, Some(mask));
            x = t.add(x, a);
            let h = layer_norm(t, b, &format!("lm.{l}.ln2"), x);
            let m = mlp(t, b, &format!("lm.{l}.mlp"), h, Activation::Gelu);
            x = t.add(x, m);
        }
        let x = layer_norm(t, b, "lm.lnf", x);
        linear(t, b, "lm.head", x)
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Mat> {
        self.check_tokens(tokens)?;
        let mut t = Tape::new();
        let b = self.params.bind_frozen(&mut t);
        let out = self.forward(&mut t, &b, tokens);
        Ok(t.value(out).clone())
    }
}

fn nll_on_tape(t: &mut Tape, logits: Var, seq: &[usize]) -> Var {
    let n = seq.len();
    let preds = t.slice_rows(logits, 0, n - 1);
    let logp = t.log_softmax(preds);
    let at: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, seq[i + 1])).collect();
    let picked = t.pick(logp, &at);
    let mean = t.mean(picked);
    t.scale(mean, -1.0)
}

/// Mean next-token negative log-likelihood over positions `1..n`.
pub fn sft_loss(m: &RestorerLm, seq: &[usize]) -> Result<f64> {
    ensure!(seq.len() >= 2, "need at least two tokens");
    let logits = m.logits(seq)?;
    let logp = log_softmax_rows(&logits);
    let total: f64 = (0..seq.len() - 1).map(|i| -logp[[i, seq[i + 1]]]).sum();
    Ok(total / (seq.len() - 1) as f64)
}

/// [`sft_loss`] averaged over `batch`, with its parameter gradient.
pub fn sft_loss_and_grads(m: &RestorerLm, batch: &[&[usize]]) -> Result<(f64, Vec<Mat>)> {
    ensure!(!batch.is_empty(), "empty batch");
    let mut t = Tape::new();
    let b = m.params.bind(&mut t);
    let mut total: Option<Var> = None;
    for seq in batch {
        ensure!(seq.len() >= 2, "need at least two tokens");
        m.check_tokens(seq)?;
        let logits = m.forward(&mut t, &b, seq);
        let l = nll_on_tape(&mut t, logits, seq);
        total = Some(match total {
            None => l,
            Some(acc) => t.add(acc, l),
        });
    }
    let loss = t.scale(total.expect("nonempty"), 1.0 / batch.len() as f64);
    let grads = t.backward(loss);
    Ok((t.scalar(loss), m.params.grads(&b, &grads)))
}

/// Serialized trajectories plus the shape they were produced with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub k: usize,
    pub steps: usize,
    pub codebook_size: usize,
    pub sequences: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    k: usize,
    steps: usize,
    codebook_size: usize,
    specials: std::collections::BTreeMap<String, usize>,
    count: usize,
}

const CORPUS_FORMAT: &str = "graft-corpus";
const CORPUS_VERSION: u32 = 1;

impl TokenCorpus {
    pub fn new(k: usize, steps: usize, codebook_size: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        let c = TokenCorpus { k, steps, codebook_size, sequences };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            let blocks =
                deserialize_trajectory(s, self.k).map_err(|e| Error::Schema(format!("trajectory {i}: {e}")))?;
            if blocks.len() != self.steps + 1 {
                return Err(Error::Schema(format!(
                    "trajectory {i} has {} blocks, expected {}",
                    blocks.len(),
                    self.steps + 1
                )));
            }
            if blocks.iter().flatten().any(|&t| t >= self.codebook_size) {
                return Err(Error::Schema(format!("trajectory {i} has a token outside the codebook")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// One JSON header line, then one space-separated trajectory per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            k: self.k,
            steps: self.steps,
            codebook_size: self.codebook_size,
            specials: [("bos", BOS), ("eos", EOS), ("sep", SEP)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            count: self.sequences.len(),
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        for s in &self.sequences {
            let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty corpus file".into()))?;
        let header: CorpusHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::Schema(format!("unsupported corpus {} v{}", header.format, header.version)));
        }
        let expected = [("bos", BOS), ("eos", EOS), ("sep", SEP)];
        if expected.iter().any(|(k, v)| header.specials.get(*k) != Some(v)) {
            return Err(Error::Schema("corpus special-token map differs from this build".into()));
        }
        let mut sequences = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|w| w.parse::<usize>().map_err(|e| parse_err(i + 1, format!("{w:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        if sequences.len() != header.count {
            return Err(Error::Schema(format!("header declares {} trajectories, found {}", header.count, sequences.len())));
        }
        TokenCorpus::new(header.k, header.steps, header.codebook_size, sequences)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { lr: 1e-4, epochs: 20, batch_size: 1, max_steps: None, seed: 0 }
    }
}

/// Adam on the mean next-token loss, shuffling the corpus every epoch.
/// Returns the per-epoch mean loss.
pub fn train_sft(m: &mut RestorerLm, corpus: &TokenCorpus, cfg: &SftConfig) -> Result<Vec<f64>> {
    ensure!(!corpus.is_empty(), "SFT needs a nonempty corpus");
    ensure!(cfg.lr > 0.0 && cfg.batch_size >= 1, "invalid SFT settings");
    ensure!(
        corpus.codebook_size <= m.config.codebook_size,
        "corpus codebook of {} exceeds model vocabulary",
        corpus.codebook_size
    );
    let mut opt = Adam::new(&m.params, cfg.lr);
    let mut rng = seeded(derive(cfg.seed, 30));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|s| steps >= s) {
                if count > 0 {
                    log.push(sum / count as f64);
                }
                break 'outer;
            }
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| corpus.sequences[i].as_slice()).collect();
            let (loss, grads) = sft_loss_and_grads(m, &batch)?;
            opt.step(&mut m.params, &grads);
            steps += 1;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = sum / count.max(1) as f64;
        info!("sft epoch {epoch}: loss {mean:.5}");
        log.push(mean);
    }
    Ok(log)
}

/// Which ids the policy may emit at a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    /// Inside a block: graph tokens only.
    Graph,
    /// After a complete block: SEP or EOS.
    Boundary,
}

impl Slot {
    pub fn allows(self, id: usize) -> bool {
        match self {
            Slot::Graph => id >= SPECIALS,
            Slot::Boundary => id == SEP || id == EOS,
        }
    }

    /// Additive mask row (`1×V`) blocking disallowed ids.
    pub fn mask(self, vocab: usize) -> Mat {
        Array2::from_shape_fn((1, vocab), |(_, j)| if self.allows(j) { 0.0 } else { NEG })
    }
}

/// One sampled token: the index of the emitted token in the sequence and the
/// constraint it was drawn under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub index: usize,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub decisions: Vec<Decision>,
    pub k: usize,
}

impl Generation {
    /// Codebook-index blocks, prompt block first.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let end = if self.tokens.last() == Some(&EOS) { self.tokens.len() - 1 } else { self.tokens.len() };
        self.tokens[1..end]
            .split(|&t| t == SEP)
            .filter(|b| b.len() == self.k)
            .map(|b| b.iter().map(|&t| t - SPECIALS).collect())
            .collect()
    }

    /// The last complete block; the prompt block when nothing was generated.
    pub fn final_block(&self) -> Option<Vec<usize>> {
        self.blocks().pop()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_k: None, seed: 0 }
    }
}

/// Checks a prompt (`BOS` followed by one complete block) and returns `K`.
pub fn prompt_block_len(prompt: &[usize]) -> Result<usize> {
    ensure!(prompt.len() >= 2 && prompt[0] == BOS, "prompt must be BOS followed by a block of graph tokens");
    ensure!(prompt[1..].iter().all(|&t| t >= SPECIALS), "prompt block may hold graph tokens only");
    Ok(prompt.len() - 1)
}

/// Prompt for a clean token block.
pub fn prompt_from_block(block: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(block.iter().map(|&s| graph_token(s))).collect()
}

fn pick_token(logits: ndarray::ArrayView1<f64>, slot: Slot, cfg: &SamplingConfig, rng: &mut impl Rng) -> usize {
    let mut cands: Vec<(usize, f64)> =
        logits.iter().enumerate().filter(|(j, _)| slot.allows(*j)).map(|(j, &l)| (j, l)).collect();
    if cfg.temperature <= 0.0 {
        return cands.iter().fold(cands[0], |best, &c| if c.1 > best.1 { c } else { best }).0;
    }
    if let Some(k) = cfg.top_k {
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k.max(1));
    }
    let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cands.iter().map(|c| ((c.1 - max) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cands.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    cands.last().unwrap().0
}

/// Autoregressive continuation of `prompt` for up to `max_blocks` blocks under
/// the block constraint. Reaching the block limit closes the sequence with EOS.
pub fn generate(m: &RestorerLm, prompt: &[usize], cfg: &SamplingConfig, max_blocks: usize) -> Result<Generation> {
    let k = prompt_block_len(prompt)?;
    ensure!(
        prompt.len() + max_blocks * (k + 1) < m.config.context,
        "prompt plus {max_blocks} blocks exceeds the context of {}",
        m.config.context
    );
    m.check_tokens(prompt)?;
    let mut rng = seeded(cfg.seed);
    let mut tokens = prompt.to_vec();
    let mut decisions = Vec::new();
    let (mut in_block, mut done) = (k, 0usize);
    loop {
        let slot = if in_block == k {
            if done == max_blocks {
                tokens.push(EOS);
                break;
            }
            Slot::Boundary
        } else {
            Slot::Graph
        };
        let logits = m.logits(&tokens)?;
        let id = pick_token(logits.row(tokens.len() - 1), slot, cfg, &mut rng);
        decisions.push(Decision { index: tokens.len(), slot });
        tokens.push(id);
        match id {
            EOS => break,
            SEP => in_block = 0,
            _ => {
                in_block += 1;
                if in_block == k {
                    done += 1;
                }
            }
        }
    }
    Ok(Generation { tokens, decisions, k })
}

/// Next-token logits at each decision of `g` with disallowed ids masked out (`decisions × V`).
pub(crate) fn decision_logits(m: &RestorerLm, t: &mut Tape, b: &Bound, g: &Generation) -> Var {
    let logits = m.forward(t, b, &g.tokens);
    let rows: Vec<usize> = g.decisions.iter().map(|d| d.index - 1).collect();
    let picked = t.gather_rows(logits, &rows);
    let v = m.vocab_size();
    let mut mask = Mat::zeros((rows.len(), v));
    for (i, d) in g.decisions.iter().enumerate() {
        mask.row_mut(i).assign(&d.slot.mask(v).row(0));
    }
    let mask = t.constant(mask);
    t.add(picked, mask)
}

/// Masked policy distributions at each decision of `g` (`decisions × V`).
pub fn decision_probs(m: &RestorerLm, g: &Generation) -> Result<Mat> {
    m.check_tokens(&g.tokens)?;
    let mut t = Tape::new();
    let b = m.params.bind_frozen(&mut t);
    let logits = decision_logits(m, &mut t, &b, g);
    Ok(softmax_rows(t.value(logits)))
}
