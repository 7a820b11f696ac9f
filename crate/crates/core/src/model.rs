//! Frozen per-frame extractor, trainable projector, per-size aggregators,
//! side embedding and the two location heads.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Segment, Task};
use crate::error::{Error, Result};
use crate::ndmath::{Bound, ParamStore, Tape, Tensor, Var};
use crate::objectives::ContrastiveParams;
use crate::seed::derive_seed;
use crate::sim::{Team, N_AREAS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_enc: usize,
    pub d_proj: usize,
    pub d_agg: usize,
    pub d_s: usize,
    /// Subset sizes that get their own aggregator and heads.
    pub pov_sizes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            d_enc: 128,
            d_proj: 64,
            d_agg: 128,
            d_s: 16,
            pov_sizes: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_h, self.d_enc, self.d_proj, self.d_agg, self.d_s];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        let mut sorted = self.pov_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != self.pov_sizes.len() || sorted[0] == 0 || sorted[sorted.len() - 1] > 5 {
            return Err(Error::Config(format!(
                "pov_sizes must be distinct values in 1..=5, got {:?}",
                self.pov_sizes
            )));
        }
        Ok(())
    }
}

/// Weights from `U(-√(3g/fan_in), √(3g/fan_in))`, giving variance `g/fan_in`;
/// `g = 2` for layers feeding a ReLU, `g = 1` otherwise. Biases start at 0.
fn fan_in_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> (Tensor, Tensor) {
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = Tensor::new(&[fan_in, fan_out], w).expect("layer shape");
    (w, Tensor::zeros(&[fan_out]))
}

const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

/// Fixed random two-layer network applied to every frame, then averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenExtractor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FrozenExtractor {
    pub fn new(width: usize, d_h: usize, d_enc: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe7]));
        let (w1, b1) = fan_in_layer(&mut rng, width, d_h, RELU_GAIN);
        let (w2, b2) = fan_in_layer(&mut rng, d_h, d_enc, LINEAR_GAIN);
        Self { w1, b1, w2, b2 }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Mean over frames of `relu(x W1 + b1) W2 + b2`.
    pub fn encode(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let (_, w) = frames.dims2()?;
        if w != self.input_width() {
            return Err(Error::domain(format!(
                "segment width {w}, extractor expects {}",
                self.input_width()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(frames.clone());
        let [w1, b1, w2, b2] = [&self.w1, &self.b1, &self.w2, &self.b2].map(|p| tape.leaf(p.clone()));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        let pooled = tape.mean_axis(o, 0)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for &x in p.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn head_prefix(task: Task, k: usize) -> String {
    format!("head.{}{k}.", task.name())
}

pub fn agg_prefix(k: usize) -> String {
    format!("agg{k}.")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub extractor: FrozenExtractor,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// Projector output before normalization.
    pub embedding: Vec<f64>,
    pub u: Vec<f64>,
}

/// Inputs of one prediction: rows of the embedding matrix forming each
/// subset (ascending agent order) and the subset's team.
#[derive(Clone, Debug)]
pub struct Subsets {
    pub rows: Vec<Vec<usize>>,
    pub teams: Vec<Team>,
}

impl Model {
    pub fn new(cfg: ModelConfig, width: usize, seed: u64, contrastive: ContrastiveParams, bias_trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let extractor = FrozenExtractor::new(width, cfg.d_h, cfg.d_enc, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7a]));
        let mut params = ParamStore::new();
        let mut mlp = |params: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize| {
            let (w1, b1) = fan_in_layer(&mut rng, d_in, cfg.d_h, RELU_GAIN);
            let (w2, b2) = fan_in_layer(&mut rng, cfg.d_h, d_out, LINEAR_GAIN);
            for (name, t) in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)] {
                params.insert(format!("{prefix}{name}"), t, true);
            }
        };
        mlp(&mut params, "projector.", cfg.d_enc, cfg.d_proj);
        for &k in &cfg.pov_sizes {
            mlp(&mut params, &agg_prefix(k), k * cfg.d_proj, cfg.d_agg);
            for task in Task::ALL {
                mlp(&mut params, &head_prefix(task, k), cfg.d_agg + cfg.d_s, N_AREAS);
            }
        }
        let bound = 1.0 / (cfg.d_s as f64).sqrt();
        let side = (0..2 * cfg.d_s).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert("side.table", Tensor::new(&[2, cfg.d_s], side)?, true);
        contrastive.register(&mut params, bias_trainable);
        Ok(Self {
            cfg,
            extractor,
            params,
        })
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let p = |n: &str| bound.get(&format!("{prefix}{n}"));
        let h = tape.matmul(x, p("w1")?)?;
        let h = tape.add_row(h, p("b1")?)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p("w2")?)?;
        tape.add_row(o, p("b2")?)
    }

    /// Pooled extractor outputs `[n, d_enc]` to embeddings `[n, d_proj]`.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        self.mlp(tape, bound, "projector.", pooled)
    }

    /// Logits `[subsets, 23]` for every subset of one size.
    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        embeddings: Var,
        subsets: &Subsets,
        task: Task,
    ) -> Result<Var> {
        let k = subsets.rows.first().map_or(0, Vec::len);
        if !self.cfg.pov_sizes.contains(&k) {
            return Err(Error::domain(format!("no aggregator for subset size {k}")));
        }
        if subsets.rows.iter().any(|r| r.len() != k) || subsets.rows.len() != subsets.teams.len() {
            return Err(Error::domain("subsets must share one size and carry one team each"));
        }
        let flat: Vec<usize> = subsets.rows.iter().flatten().copied().collect();
        let picked = tape.gather_rows(embeddings, &flat)?;
        let joined = tape.reshape(picked, &[subsets.rows.len(), k * self.cfg.d_proj])?;
        let agg = self.mlp(tape, bound, &agg_prefix(k), joined)?;
        let side_idx: Vec<usize> = subsets.teams.iter().map(|t| t.index()).collect();
        let side = tape.gather_rows(bound.get("side.table")?, &side_idx)?;
        let z = tape.concat(&[agg, side], 1)?;
        self.mlp(tape, bound, &head_prefix(task, k), z)
    }

    /// Embedding and unit vector of one segment.
    pub fn encode(&self, segment: &Segment) -> Result<Encoded> {
        let pooled = self.extractor.encode(&segment.features)?;
        self.encode_pooled(&pooled)
    }

    pub fn encode_pooled(&self, pooled: &[f64]) -> Result<Encoded> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &["projector."]);
        let x = tape.leaf(Tensor::new(&[1, pooled.len()], pooled.to_vec())?);
        let e = self.project(&mut tape, &bound, x)?;
        let u = tape.l2_normalize_rows(e)?;
        Ok(Encoded {
            embedding: tape.value(e).data().to_vec(),
            u: tape.value(u).data().to_vec(),
        })
    }

    /// Binds the parameters under the given prefixes.
    pub fn bind(&self, tape: &mut Tape, prefixes: &[&str]) -> Bound {
        let mut b = Bound::default();
        for p in prefixes {
            self.params.bind_prefix(tape, p, &mut b);
        }
        b
    }

    /// Logits for one subset of embeddings given in ascending agent order.
    pub fn predict(&self, embeddings: &[&[f64]], team: Team, task: Task) -> Result<Vec<f64>> {
        let k = embeddings.len();
        if !(1..=5).contains(&k) {
            return Err(Error::domain(format!("subset size {k} outside 1..=5")));
        }
        let mut tape = Tape::new();
        let agg = agg_prefix(k);
        let head = head_prefix(task, k);
        let bound = self.bind(&mut tape, &[agg.as_str(), head.as_str(), "side."]);
        let data: Vec<f64> = embeddings.iter().flat_map(|e| e.iter().copied()).collect();
        let e = tape.leaf(Tensor::new(&[k, self.cfg.d_proj], data)?);
        let subsets = Subsets {
            rows: vec![(0..k).collect()],
            teams: vec![team],
        };
        let logits = self.predict_tape(&mut tape, &bound, e, &subsets, task)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn contrastive(&self) -> Result<ContrastiveParams> {
        ContrastiveParams::from_store(&self.params)
    }
}

/// Checks that every member of a subset comes from the same team.
pub fn check_single_team(teams: &[Team]) -> Result<Team> {
    let first = *teams.first().ok_or_else(|| Error::domain("empty subset"))?;
    if teams.iter().any(|&t| t != first) {
        return Err(Error::domain("subset mixes both teams"));
    }
    Ok(first)
}

/// Checkpoint layout (little-endian):
///
/// ```text
/// magic "XCKP", version u16 = 1
/// config JSON: u32 length + UTF-8
/// n_tensors u32, then per tensor:
///   name: u16 length + UTF-8, trainable u8, rank u8, rank × u32 dims,
///   product(dims) × f64 values
/// ```
///
/// Extractor arrays are stored under `extractor.*` with trainable = 0.
pub const CKPT_MAGIC: [u8; 4] = *b"XCKP";
pub const CKPT_VERSION: u16 = 1;

const EXTRACTOR_KEYS: [&str; 4] = ["extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2"];

impl Model {
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.cfg)?;
        let ex = [&self.extractor.w1, &self.extractor.b1, &self.extractor.w2, &self.extractor.b2];
        let mut entries: Vec<(&str, &Tensor, bool)> = EXTRACTOR_KEYS.iter().copied().zip(ex).map(|(k, t)| (k, t, false)).collect();
        entries.extend(self.params.iter().map(|(k, p)| (k, &p.value, p.trainable)));
        (|| -> std::io::Result<()> {
            w.write_all(&CKPT_MAGIC)?;
            w.write_u16::<LittleEndian>(CKPT_VERSION)?;
            w.write_u32::<LittleEndian>(cfg.len() as u32)?;
            w.write_all(&cfg)?;
            w.write_u32::<LittleEndian>(entries.len() as u32)?;
            for (name, t, trainable) in entries {
                w.write_u16::<LittleEndian>(name.len() as u16)?;
                w.write_all(name.as_bytes())?;
                w.write_u8(trainable as u8)?;
                w.write_u8(t.shape().len() as u8)?;
                for &d in t.shape() {
                    w.write_u32::<LittleEndian>(d as u32)?;
                }
                for &x in t.data() {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            w.flush()
        })()
        .map_err(|source| Error::Io { offset: 0, source })
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format("checkpoint ends early".into())
            } else {
                Error::Io { offset: 0, source: e }
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(eof)?;
        if version != CKPT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let mut cfg = vec![0u8; r.read_u32::<LittleEndian>().map_err(eof)? as usize];
        r.read_exact(&mut cfg).map_err(eof)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg)?;
        cfg.validate()?;
        let n = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut params = ParamStore::new();
        let mut extractor: [Option<Tensor>; 4] = Default::default();
        for _ in 0..n {
            let mut name = vec![0u8; r.read_u16::<LittleEndian>().map_err(eof)? as usize];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            let trainable = r.read_u8().map_err(eof)? != 0;
            let rank = r.read_u8().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
            }
            let mut data = vec![0f64; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(eof)?;
            let t = Tensor::new(&shape, data)?;
            match EXTRACTOR_KEYS.iter().position(|&k| k == name) {
                Some(i) => extractor[i] = Some(t),
                None => params.insert(name, t, trainable),
            }
        }
        let [Some(w1), Some(b1), Some(w2), Some(b2)] = extractor else {
            return Err(Error::Format("checkpoint lacks extractor weights".into()));
        };
        Ok(Self {
            cfg,
            extractor: FrozenExtractor { w1, b1, w2, b2 },
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FRAME_DIM;

    fn small() -> Model {
        let cfg = ModelConfig {
            d_h: 8,
            d_enc: 6,
            d_proj: 4,
            d_agg: 5,
            d_s: 3,
            pov_sizes: vec![1, 3],
        };
        Model::new(cfg, FRAME_DIM, 9, ContrastiveParams::default(), true).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = Model::load(&buf[..]).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.extractor, m.extractor);
        assert_eq!(back.params.digest(""), m.params.digest(""));
        buf[0] = b'Y';
        assert!(matches!(Model::load(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn predict_shapes_and_size_check() {
        let m = small();
        let e = vec![0.1, -0.2, 0.3, 0.0];
        assert_eq!(m.predict(&[&e], Team::T, Task::Tln).unwrap().len(), 23);
        assert!(m.predict(&[&e, &e], Team::T, Task::Tln).is_err());
        assert!(check_single_team(&[Team::T, Team::CT]).is_err());
    }

    #[test]
    fn bad_width_rejected() {
        let m = small();
        assert!(m.extractor.encode(&Tensor::zeros(&[4, FRAME_DIM - 1])).is_err());
    }
}
