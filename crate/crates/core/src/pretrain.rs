//! Self-supervised key embeddings for questions and KCs.
//!
//! A feed-forward encoder maps each node (one-hot or a precomputed text
//! vector) to a `d_k` key. The first layer is specific to the node type; the
//! remaining two layers and the regression head are shared. The head reads
//! `|k_a - k_b|` and regresses the hop count between the two nodes, so the
//! prediction is symmetric in the pair. Question pairs and KC pairs are
//! trained jointly in alternating mini-batches with a squared-error loss.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TgmnError};
use crate::kcgraph::{BipartiteGraph, HopPair, NodeType};
use crate::matrix_io::{read_matrix, write_matrix};
use crate::params::{glorot, Adam, BoundParams, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub d_k: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pairs_per_type: usize,
    pub max_hops: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            d_k: 512,
            hidden: 512,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            pairs_per_type: 2000,
            max_hops: 6,
            seed: 0,
        }
    }
}

/// Per-node input features.
#[derive(Clone, Debug, PartialEq)]
pub enum InputMode {
    OneHot,
    /// Precomputed text vectors, one row per node.
    TextVectors {
        questions: Array2<f64>,
        kcs: Array2<f64>,
    },
}

impl InputMode {
    /// Reads text-vector files in the key-matrix format and checks coverage.
    pub fn text_from_files(questions: &Path, kcs: &Path, graph: &BipartiteGraph) -> Result<Self> {
        let q: Array2<f64> = read_matrix(questions)?;
        let c: Array2<f64> = read_matrix(kcs)?;
        let mode = InputMode::TextVectors { questions: q, kcs: c };
        mode.check(graph)?;
        Ok(mode)
    }

    fn check(&self, graph: &BipartiteGraph) -> Result<()> {
        if let InputMode::TextVectors { questions, kcs } = self {
            let mut missing: Vec<usize> = (questions.nrows()..graph.num_questions()).collect();
            // KC ids are reported after the question ids, offset by L.
            missing.extend((kcs.nrows()..graph.num_kcs()).map(|k| graph.num_questions() + k));
            if !missing.is_empty() {
                return Err(TgmnError::MissingVectors(missing));
            }
        }
        Ok(())
    }
}

/// Frozen keys handed to the memory network.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyEmbeddings {
    pub question_keys: Array2<f64>,
    pub kc_keys: Array2<f64>,
}

impl KeyEmbeddings {
    pub fn d_k(&self) -> usize {
        self.kc_keys.ncols()
    }

    /// FNV-1a over the bit patterns of both matrices.
    pub fn checksum(&self) -> u64 {
        matrix_checksum(&[&self.question_keys, &self.kc_keys])
    }
}

pub fn matrix_checksum(matrices: &[&Array2<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in matrices {
        for v in m.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

pub const QUESTION_KEY_FILE: &str = "question_keys.txt";
pub const KC_KEY_FILE: &str = "kc_keys.txt";

/// Writes `question_keys.txt` and `kc_keys.txt` into `dir`.
pub fn export_keys(keys: &KeyEmbeddings, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TgmnError::io(dir, e))?;
    write_matrix(&keys.question_keys, &dir.join(QUESTION_KEY_FILE))?;
    write_matrix(&keys.kc_keys, &dir.join(KC_KEY_FILE))
}

pub fn load_keys(dir: &Path) -> Result<KeyEmbeddings> {
    let question_keys: Array2<f64> = read_matrix(&dir.join(QUESTION_KEY_FILE))?;
    let kc_keys: Array2<f64> = read_matrix(&dir.join(KC_KEY_FILE))?;
    if question_keys.ncols() != kc_keys.ncols() {
        return Err(TgmnError::shape("d_k", kc_keys.ncols(), question_keys.ncols()));
    }
    Ok(KeyEmbeddings { question_keys, kc_keys })
}

#[derive(Clone, Copy, Debug)]
struct EncoderIds {
    question_in_w: ParamId,
    question_in_b: ParamId,
    kc_in_w: ParamId,
    kc_in_b: ParamId,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Three-layer node encoder plus the hop-regression head.
#[derive(Clone, Debug)]
pub struct NodeEncoder {
    params: ParamStore<f64>,
    ids: EncoderIds,
    input: InputMode,
    num_questions: usize,
    num_kcs: usize,
    d_k: usize,
}

impl NodeEncoder {
    pub fn new(graph: &BipartiteGraph, input: InputMode, config: &PretrainConfig) -> Result<Self> {
        if config.d_k == 0 || config.hidden == 0 {
            return Err(TgmnError::Argument("d_k and hidden must be >= 1".into()));
        }
        input.check(graph)?;
        let (q_in, c_in) = match &input {
            InputMode::OneHot => (graph.num_questions(), graph.num_kcs()),
            InputMode::TextVectors { questions, kcs } => (questions.ncols(), kcs.ncols()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let mut params = ParamStore::new();
        let ids = EncoderIds {
            question_in_w: params.add("question_in_w", glorot(q_in, h, &mut rng)),
            question_in_b: params.add("question_in_b", Array2::zeros((1, h))),
            kc_in_w: params.add("kc_in_w", glorot(c_in, h, &mut rng)),
            kc_in_b: params.add("kc_in_b", Array2::zeros((1, h))),
            hidden_w: params.add("hidden_w", glorot(h, h, &mut rng)),
            hidden_b: params.add("hidden_b", Array2::zeros((1, h))),
            out_w: params.add("out_w", glorot(h, config.d_k, &mut rng)),
            out_b: params.add("out_b", Array2::zeros((1, config.d_k))),
            head_w: params.add("head_w", glorot(config.d_k, 1, &mut rng)),
            head_b: params.add("head_b", Array2::zeros((1, 1))),
        };
        Ok(NodeEncoder {
            params,
            ids,
            input,
            num_questions: graph.num_questions(),
            num_kcs: graph.num_kcs(),
            d_k: config.d_k,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// Width of the type-specific input layer.
    pub fn input_dim(&self, node_type: NodeType) -> usize {
        let id = match node_type {
            NodeType::Question => self.ids.question_in_w,
            NodeType::Kc => self.ids.kc_in_w,
        };
        self.params.get(id).nrows()
    }

    fn encode(&self, tape: &mut Tape<f64>, p: &BoundParams, node_type: NodeType, nodes: &[usize]) -> Var {
        let (w_in, b_in) = match node_type {
            NodeType::Question => (self.ids.question_in_w, self.ids.question_in_b),
            NodeType::Kc => (self.ids.kc_in_w, self.ids.kc_in_b),
        };
        let first = match &self.input {
            // One-hot rows times W select rows of W.
            InputMode::OneHot => tape.gather_rows(p.var(w_in), nodes),
            InputMode::TextVectors { questions, kcs } => {
                let table = match node_type {
                    NodeType::Question => questions,
                    NodeType::Kc => kcs,
                };
                let x = tape.constant(table.select(Axis(0), nodes));
                tape.matmul(x, p.var(w_in))
            }
        };
        let h1 = tape.add_row(first, p.var(b_in));
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, p.var(self.ids.hidden_w));
        let h2 = tape.add_row(h2, p.var(self.ids.hidden_b));
        let h2 = tape.relu(h2);
        let out = tape.matmul(h2, p.var(self.ids.out_w));
        tape.add_row(out, p.var(self.ids.out_b))
    }

    fn head(&self, tape: &mut Tape<f64>, p: &BoundParams, a: Var, b: Var) -> Var {
        let diff = tape.sub(a, b);
        let pair = tape.abs(diff);
        let out = tape.matmul(pair, p.var(self.ids.head_w));
        tape.add_row(out, p.var(self.ids.head_b))
    }

    /// Keys of every node of `node_type` under the current weights.
    pub fn node_keys(&self, node_type: NodeType) -> Array2<f64> {
        let n = match node_type {
            NodeType::Question => self.num_questions,
            NodeType::Kc => self.num_kcs,
        };
        let mut out = Array2::zeros((n, self.d_k));
        for start in (0..n).step_by(1024) {
            let end = (start + 1024).min(n);
            let nodes: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let keys = self.encode(&mut tape, &p, node_type, &nodes);
            out.slice_mut(s![start..end, ..]).assign(tape.value(keys));
        }
        out
    }

    pub fn keys(&self) -> KeyEmbeddings {
        KeyEmbeddings {
            question_keys: self.node_keys(NodeType::Question),
            kc_keys: self.node_keys(NodeType::Kc),
        }
    }

    /// Mean squared error of the hop predictions over `pairs`.
    pub fn mse(&self, pairs: &[HopPair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for chunk in pairs.chunks(1024) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let (pred, targets) = self.batch_predictions(&mut tape, &p, chunk);
            total += tape
                .value(pred)
                .iter()
                .zip(targets.iter())
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>();
        }
        total / pairs.len() as f64
    }

    fn batch_predictions(&self, tape: &mut Tape<f64>, p: &BoundParams, pairs: &[HopPair]) -> (Var, Array1<f64>) {
        let node_type = pairs[0].node_type;
        debug_assert!(pairs.iter().all(|pr| pr.node_type == node_type));
        // Encode each distinct node once, then gather both sides of every pair.
        let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
        for pr in pairs {
            for n in [pr.node_a, pr.node_b] {
                let next = slot.len();
                slot.entry(n).or_insert(next);
            }
        }
        let mut nodes = vec![0; slot.len()];
        for (&n, &i) in &slot {
            nodes[i] = n;
        }
        let keys = self.encode(tape, p, node_type, &nodes);
        let a_idx: Vec<usize> = pairs.iter().map(|pr| slot[&pr.node_a]).collect();
        let b_idx: Vec<usize> = pairs.iter().map(|pr| slot[&pr.node_b]).collect();
        let a = tape.gather_rows(keys, &a_idx);
        let b = tape.gather_rows(keys, &b_idx);
        let pred = self.head(tape, p, a, b);
        let targets = pairs.iter().map(|pr| pr.hops as f64).collect();
        (pred, targets)
    }

    fn train_batch(&mut self, adam: &mut Adam<f64>, pairs: &[HopPair]) -> f64 {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (pred, targets) = self.batch_predictions(&mut tape, &p, pairs);
        let target = tape.constant(targets.insert_axis(Axis(1)));
        let err = tape.sub(pred, target);
        let sq = tape.mul(err, err);
        let loss = tape.mean(sq);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let grads = self.params.collect_grads(&p, &grads);
        adam.step(&mut self.params, &grads);
        value
    }
}

/// Hop estimate for two keys under the encoder's head.
pub fn predict_hops(encoder: &NodeEncoder, key_a: &[f64], key_b: &[f64]) -> Result<f64> {
    let d = encoder.d_k();
    if key_a.len() != d || key_b.len() != d {
        return Err(TgmnError::shape("key", d, format!("({}, {})", key_a.len(), key_b.len())));
    }
    let mut tape = Tape::new();
    let p = encoder.params.bind_frozen(&mut tape);
    let a = tape.constant(Array2::from_shape_vec((1, d), key_a.to_vec()).unwrap());
    let b = tape.constant(Array2::from_shape_vec((1, d), key_b.to_vec()).unwrap());
    let out = encoder.head(&mut tape, &p, a, b);
    Ok(tape.scalar(out))
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: NodeEncoder,
    pub keys: KeyEmbeddings,
    /// Mean squared error over all training pairs: entry 0 before training,
    /// entry `e` after epoch `e`.
    pub loss_history: Vec<f64>,
}

/// Trains the encoder on both hop-regression tasks and returns the keys.
pub fn pretrain_embeddings(
    graph: &BipartiteGraph,
    pairs_q: &[HopPair],
    pairs_c: &[HopPair],
    input: InputMode,
    config: &PretrainConfig,
) -> Result<Pretrained> {
    for (pairs, ty) in [(pairs_q, NodeType::Question), (pairs_c, NodeType::Kc)] {
        if let Some(bad) = pairs.iter().find(|p| {
            p.node_type != ty || p.node_a >= graph.num_nodes(ty) || p.node_b >= graph.num_nodes(ty)
        }) {
            return Err(TgmnError::Argument(format!("pair {bad:?} does not belong to this graph")));
        }
    }
    if config.batch_size == 0 {
        return Err(TgmnError::Argument("batch_size must be >= 1".into()));
    }
    let mut encoder = NodeEncoder::new(graph, input, config)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut q_order: Vec<usize> = (0..pairs_q.len()).collect();
    let mut c_order: Vec<usize> = (0..pairs_c.len()).collect();
    let all_mse = |enc: &NodeEncoder| {
        let n = pairs_q.len() + pairs_c.len();
        if n == 0 {
            return 0.0;
        }
        (enc.mse(pairs_q) * pairs_q.len() as f64 + enc.mse(pairs_c) * pairs_c.len() as f64) / n as f64
    };
    let mut loss_history = vec![all_mse(&encoder)];
    for epoch in 0..config.epochs {
        q_order.shuffle(&mut rng);
        c_order.shuffle(&mut rng);
        let q_batches: Vec<Vec<HopPair>> = q_order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| pairs_q[i]).collect())
            .collect();
        let c_batches: Vec<Vec<HopPair>> = c_order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| pairs_c[i]).collect())
            .collect();
        for i in 0..q_batches.len().max(c_batches.len()) {
            if let Some(b) = q_batches.get(i) {
                encoder.train_batch(&mut adam, b);
            }
            if let Some(b) = c_batches.get(i) {
                encoder.train_batch(&mut adam, b);
            }
        }
        let mse = all_mse(&encoder);
        if !mse.is_finite() {
            return Err(TgmnError::Numeric(format!("pretraining loss diverged at epoch {}", epoch + 1)));
        }
        log::debug!("pretrain epoch {} mse {mse:.5}", epoch + 1);
        loss_history.push(mse);
    }
    let keys = encoder.keys();
    Ok(Pretrained {
        encoder,
        keys,
        loss_history,
    })
}
