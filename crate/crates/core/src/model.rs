//! The detector: audio encoder, text encoder, cross-attention pattern
//! extractor and recurrent pattern discriminator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dsp::{FeatureMatrix, N_MELS};
use crate::error::{Error, Result};
use crate::layers::{affine, gru_forward, GruVars};
use crate::tensor::Tensor;
use crate::text::{phoneme_onehot, PhonemeSequence, INVENTORY_SIZE};

pub const EMBED_DIM: usize = 128;
pub const KERNEL_SIZE: usize = 5;
pub const AUDIO_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding width `m`; also the conv channel count and every GRU width.
    pub dim: usize,
    pub mel_dim: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: EMBED_DIM,
            mel_dim: N_MELS,
            vocab: INVENTORY_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn with_dim(dim: usize) -> Self {
        ModelConfig { dim, ..Self::default() }
    }
}

/// Off-tape GRU weights; see [`GruVars`] for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub w_input: Tensor,
    pub w_gates: Tensor,
    pub w_candidate: Tensor,
    pub bias: Tensor,
}

impl GruWeights {
    fn zeros(input: usize, hidden: usize) -> Self {
        GruWeights {
            w_input: Tensor::zeros(&[input, 3 * hidden]),
            w_gates: Tensor::zeros(&[hidden, 2 * hidden]),
            w_candidate: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[3 * hidden]),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        GruVars {
            w_input: leaf(tape, &self.w_input, trainable),
            w_gates: leaf(tape, &self.w_gates, trainable),
            w_candidate: leaf(tape, &self.w_candidate, trainable),
            bias: leaf(tape, &self.bias, trainable),
        }
    }
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

macro_rules! param_list {
    ($s:ident, $($r:tt)+) => {
        vec![
            ("conv1.weight", $($r)+ $s.conv1_w),
            ("conv1.bias", $($r)+ $s.conv1_b),
            ("conv2.weight", $($r)+ $s.conv2_w),
            ("conv2.bias", $($r)+ $s.conv2_b),
            ("audio_gru1.w_input", $($r)+ $s.audio_gru1.w_input),
            ("audio_gru1.w_gates", $($r)+ $s.audio_gru1.w_gates),
            ("audio_gru1.w_candidate", $($r)+ $s.audio_gru1.w_candidate),
            ("audio_gru1.bias", $($r)+ $s.audio_gru1.bias),
            ("audio_gru2.w_input", $($r)+ $s.audio_gru2.w_input),
            ("audio_gru2.w_gates", $($r)+ $s.audio_gru2.w_gates),
            ("audio_gru2.w_candidate", $($r)+ $s.audio_gru2.w_candidate),
            ("audio_gru2.bias", $($r)+ $s.audio_gru2.bias),
            ("text.weight", $($r)+ $s.text_w),
            ("text.bias", $($r)+ $s.text_b),
            ("disc_gru.w_input", $($r)+ $s.disc_gru.w_input),
            ("disc_gru.w_gates", $($r)+ $s.disc_gru.w_gates),
            ("disc_gru.w_candidate", $($r)+ $s.disc_gru.w_candidate),
            ("disc_gru.bias", $($r)+ $s.disc_gru.bias),
            ("out.weight", $($r)+ $s.out_w),
            ("out.bias", $($r)+ $s.out_b),
        ]
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub audio_gru1: GruWeights,
    pub audio_gru2: GruWeights,
    pub text_w: Tensor,
    pub text_b: Tensor,
    pub disc_gru: GruWeights,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// `(fan_in, fan_out)` used for Glorot initialisation of a weight shape.
pub fn glorot_fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [c_out, c_in, k] => (c_in * k, c_out * k),
        [rows, cols] => (rows, cols),
        [n] => (n, n),
        _ => (1, 1),
    }
}

pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = glorot_fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform init half-width for the named weight.
pub fn init_bound(name: &str, shape: &[usize]) -> f64 {
    if name == "text.weight" {
        3f64.sqrt()
    } else {
        glorot_bound(shape)
    }
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let m = config.dim;
        ModelParams {
            config,
            conv1_w: Tensor::zeros(&[m, config.mel_dim, KERNEL_SIZE]),
            conv1_b: Tensor::zeros(&[m]),
            conv2_w: Tensor::zeros(&[m, m, KERNEL_SIZE]),
            conv2_b: Tensor::zeros(&[m]),
            audio_gru1: GruWeights::zeros(m, m),
            audio_gru2: GruWeights::zeros(m, m),
            text_w: Tensor::zeros(&[config.vocab, m]),
            text_b: Tensor::zeros(&[m]),
            disc_gru: GruWeights::zeros(m, m),
            out_w: Tensor::zeros(&[m, 1]),
            out_b: Tensor::zeros(&[1]),
        }
    }

    /// Glorot-uniform weights and zero biases, deterministic per seed. The
    /// phoneme embedding table is drawn with unit variance instead, like a
    /// lookup embedding.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.named_mut() {
            if is_bias(name) {
                continue;
            }
            let bound = init_bound(name, t.shape());
            for v in t.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        param_list!(self, &)
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        param_list!(self, &mut)
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape`; `trainable` selects params vs
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            dim: self.config.dim,
            conv1_w: leaf(tape, &self.conv1_w, trainable),
            conv1_b: leaf(tape, &self.conv1_b, trainable),
            conv2_w: leaf(tape, &self.conv2_w, trainable),
            conv2_b: leaf(tape, &self.conv2_b, trainable),
            audio_gru1: self.audio_gru1.bind(tape, trainable),
            audio_gru2: self.audio_gru2.bind(tape, trainable),
            text_w: leaf(tape, &self.text_w, trainable),
            text_b: leaf(tape, &self.text_b, trainable),
            disc_gru: self.disc_gru.bind(tape, trainable),
            out_w: leaf(tape, &self.out_w, trainable),
            out_b: leaf(tape, &self.out_b, trainable),
        }
    }

    /// Writes the versioned little-endian checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.config.dim, self.config.mel_dim, self.config.vocab] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let named = self.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            dim: r.u64()? as usize,
            mel_dim: r.u64()? as usize,
            vocab: r.u64()? as usize,
        };
        if config.dim == 0 || config.dim > 1 << 16 || config.mel_dim == 0 || config.vocab == 0 {
            return Err(Error::Checkpoint(format!("implausible config {config:?}")));
        }
        let mut params = ModelParams::zeros(config);
        let count = r.u32()? as usize;
        let mut slots = params.named_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for (name, slot) in slots.iter_mut() {
            let len = r.u32()? as usize;
            let found = r.take(len)?;
            if found != name.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(found)
                )));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(Error::Checkpoint(format!("{name}: non-finite value")));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMCDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}

/// Model tensors recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub dim: usize,
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub audio_gru1: GruVars,
    pub audio_gru2: GruVars,
    pub text_w: Var,
    pub text_b: Var,
    pub disc_gru: GruVars,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let g = |v: &GruVars| [v.w_input, v.w_gates, v.w_candidate, v.bias];
        let mut out = vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b];
        out.extend(g(&self.audio_gru1));
        out.extend(g(&self.audio_gru2));
        out.extend([self.text_w, self.text_b]);
        out.extend(g(&self.disc_gru));
        out.extend([self.out_w, self.out_b]);
        out
    }

    /// Inverse of [`ModelVars::all`].
    pub fn from_vars(dim: usize, vars: &[Var]) -> Result<Self> {
        if vars.len() != PARAM_TENSORS {
            return Err(Error::shape(format!(
                "expected {PARAM_TENSORS} model tensors, got {}",
                vars.len()
            )));
        }
        let g = |i: usize| GruVars {
            w_input: vars[i],
            w_gates: vars[i + 1],
            w_candidate: vars[i + 2],
            bias: vars[i + 3],
        };
        Ok(ModelVars {
            dim,
            conv1_w: vars[0],
            conv1_b: vars[1],
            conv2_w: vars[2],
            conv2_b: vars[3],
            audio_gru1: g(4),
            audio_gru2: g(8),
            text_w: vars[12],
            text_b: vars[13],
            disc_gru: g(14),
            out_w: vars[18],
            out_b: vars[19],
        })
    }
}

/// Number of tensors in [`ModelParams::named`].
pub const PARAM_TENSORS: usize = 20;

/// Number of audio embedding frames for `frames` input frames.
pub fn audio_embedding_len(frames: usize) -> usize {
    frames.div_ceil(AUDIO_STRIDE)
}

/// conv(stride 2) → ReLU → conv → ReLU → GRU → GRU; `T×40` in,
/// `ceil(T/2)×m` out.
pub fn encode_audio(tape: &mut Tape, features: Var, vars: &ModelVars) -> Result<Var> {
    let (frames, _) = tape.value(features).dims2()?;
    if frames == 0 {
        return Err(Error::EmptyInput("audio features have no frames"));
    }
    let x = tape.conv1d(features, vars.conv1_w, AUDIO_STRIDE)?;
    let x = tape.add_row(x, vars.conv1_b)?;
    let x = tape.relu(x)?;
    let x = tape.conv1d(x, vars.conv2_w, 1)?;
    let x = tape.add_row(x, vars.conv2_b)?;
    let x = tape.relu(x)?;
    let x = gru_forward(tape, x, &vars.audio_gru1, None)?;
    gru_forward(tape, x, &vars.audio_gru2, None)
}

/// One-hot phonemes through a single affine layer: `T_t×|P|` → `T_t×m`.
pub fn encode_text(tape: &mut Tape, onehot: Var, vars: &ModelVars) -> Result<Var> {
    if tape.value(onehot).dims2()?.0 == 0 {
        return Err(Error::EmptyInput("phoneme sequence"));
    }
    affine(tape, onehot, vars.text_w, vars.text_b)
}

/// Single-head cross attention with the text embedding as query and the
/// audio embedding as key and value. Returns `(A, Attn)`.
pub fn pattern_extract(tape: &mut Tape, e_t: Var, e_a: Var) -> Result<(Var, Var)> {
    let (tt, m) = tape.value(e_t).dims2()?;
    let (ta, m2) = tape.value(e_a).dims2()?;
    if tt == 0 || ta == 0 {
        return Err(Error::EmptyInput("pattern_extract"));
    }
    if m != m2 {
        return Err(Error::shape(format!("embedding widths differ: {m} vs {m2}")));
    }
    let logits = tape.matmul_t(e_t, e_a)?;
    let logits = tape.scale(logits, 1.0 / (m as f64).sqrt())?;
    let affinity = tape.softmax_rows(logits)?;
    let attn = tape.matmul(affinity, e_a)?;
    Ok((affinity, attn))
}

/// GRU over the attention rows; last state → affine → sigmoid.
pub fn discriminate(tape: &mut Tape, attn: Var, vars: &ModelVars) -> Result<Var> {
    let (steps, _) = tape.value(attn).dims2()?;
    if steps == 0 {
        return Err(Error::EmptyInput("attention has no rows"));
    }
    let states = gru_forward(tape, attn, &vars.disc_gru, None)?;
    let last = tape.row(states, steps - 1)?;
    let logit = affine(tape, last, vars.out_w, vars.out_b)?;
    tape.sigmoid(logit)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub prob: Var,
    pub affinity: Var,
    pub e_a: Var,
    pub e_t: Var,
}

pub fn forward_on_tape(tape: &mut Tape, features: Var, onehot: Var, vars: &ModelVars) -> Result<ForwardVars> {
    let e_a = encode_audio(tape, features, vars)?;
    let e_t = encode_text(tape, onehot, vars)?;
    let (affinity, attn) = pattern_extract(tape, e_t, e_a)?;
    let prob = discriminate(tape, attn, vars)?;
    Ok(ForwardVars {
        prob,
        affinity,
        e_a,
        e_t,
    })
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prob: f64,
    /// `T_t×T_a`, rows sum to one.
    pub affinity: Tensor,
    pub e_a: Tensor,
}

/// Inference pass on a private tape.
pub fn forward(features: &FeatureMatrix, seq: &PhonemeSequence, params: &ModelParams) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let f = tape.constant(features.frames.clone());
    let onehot = tape.constant(phoneme_onehot(seq)?);
    let out = forward_on_tape(&mut tape, f, onehot, &vars)?;
    Ok(ForwardOutput {
        prob: tape.value(out.prob).item()?,
        affinity: tape.value(out.affinity).clone(),
        e_a: tape.value(out.e_a).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;

    fn small() -> ModelConfig {
        ModelConfig::with_dim(8)
    }

    fn features(frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * N_MELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(Tensor::new(&[frames, N_MELS], data).unwrap()).unwrap()
    }

    fn seq(ids: &[usize]) -> PhonemeSequence {
        PhonemeSequence::new(ids.to_vec(), "test").unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(small(), 3);
        assert_eq!(a, ModelParams::init(small(), 3));
        assert_ne!(a, ModelParams::init(small(), 4));
        for (name, t) in a.named() {
            if is_bias(name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = init_bound(name, t.shape());
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn vars_round_trip_through_slice() {
        let p = ModelParams::init(small(), 2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let all = vars.all();
        assert_eq!(all.len(), PARAM_TENSORS);
        assert_eq!(p.named().len(), PARAM_TENSORS);
        assert_eq!(ModelVars::from_vars(8, &all).unwrap().all(), all);
        assert!(ModelVars::from_vars(8, &all[1..]).is_err());
    }

    #[test]
    fn audio_embedding_shapes() {
        let p = ModelParams::init(ModelConfig::default(), 1);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        for (frames, expect) in [(98, 49), (97, 49)] {
            let f = tape.constant(features(frames, 1).frames);
            let e = encode_audio(&mut tape, f, &vars).unwrap();
            assert_eq!(tape.value(e).shape(), &[expect, 128]);
        }
        let empty = tape.constant(Tensor::zeros(&[0, 40]));
        assert!(matches!(
            encode_audio(&mut tape, empty, &vars),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn embedding_length_is_ceil_half() {
        let p = ModelParams::init(small(), 1);
        for frames in 1..=64 {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let f = tape.constant(features(frames, frames as u64).frames);
            let e = encode_audio(&mut tape, f, &vars).unwrap();
            assert_eq!(tape.value(e).shape()[0], frames.div_ceil(2));
            assert_eq!(audio_embedding_len(frames), frames.div_ceil(2));
        }
    }

    #[test]
    fn text_embedding() {
        let p = ModelParams::init(ModelConfig::default(), 1);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let oh = tape.constant(phoneme_onehot(&seq(&[1, 2, 3, 2, 5])).unwrap());
        let e = encode_text(&mut tape, oh, &vars).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[5, 128]);
        assert_eq!(v.row(1), v.row(3));

        let z = ModelParams::zeros(ModelConfig::default());
        let vars = z.bind(&mut tape, false);
        let e = encode_text(&mut tape, oh, &vars).unwrap();
        assert!(tape.value(e).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_cases() {
        let mut tape = Tape::new();
        let e_t = tape.constant(Tensor::zeros(&[3, 4]));
        let e_a = tape.constant(Tensor::new(&[7, 4], (0..28).map(|v| v as f64 * 0.1).collect()).unwrap());
        let (a, attn) = pattern_extract(&mut tape, e_t, e_a).unwrap();
        assert_eq!(tape.value(a).shape(), &[3, 7]);
        assert_eq!(tape.value(attn).shape(), &[3, 4]);
        for v in tape.value(a).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }

        // With m = 4 the logits are q·k / 2; choose q, k so they equal
        // [[0, ln3], [ln3, 0]].
        let l3 = 3f64.ln();
        let e_t = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]).unwrap());
        let e_a = tape.constant(Tensor::from_rows(&[vec![0.0, l3, 0.0, 0.0], vec![l3, 0.0, 0.0, 0.0]]).unwrap());
        let (a, _) = pattern_extract(&mut tape, e_t, e_a).unwrap();
        let got = tape.value(a).data();
        let expect = [0.25, 0.75, 0.75, 0.25];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(pattern_extract(&mut tape, e_t, bad).is_err());
    }

    #[test]
    fn discriminator_range() {
        let z = ModelParams::zeros(small());
        let mut tape = Tape::new();
        let vars = z.bind(&mut tape, false);
        let attn = tape.constant(Tensor::full(&[1, 8], 0.3));
        let p = discriminate(&mut tape, attn, &vars).unwrap();
        assert_eq!(tape.value(p).item().unwrap(), 0.5);

        let r = ModelParams::init(small(), 9);
        let vars = r.bind(&mut tape, false);
        let attn = tape.constant(Tensor::new(&[4, 8], (0..32).map(|v| (v as f64).cos() * 3.0).collect()).unwrap());
        let pv = discriminate(&mut tape, attn, &vars).unwrap();
        let p = tape.value(pv).item().unwrap();
        assert!(p > 0.0 && p < 1.0);
        let empty = tape.constant(Tensor::zeros(&[0, 8]));
        assert!(discriminate(&mut tape, empty, &vars).is_err());
    }

    #[test]
    fn forward_composes_components() {
        let p = ModelParams::init(small(), 5);
        let f = features(20, 2);
        let s = seq(&[3, 7, 11]);
        let out = forward(&f, &s, &p).unwrap();
        assert_eq!(out.affinity.shape(), &[3, 10]);
        for r in 0..3 {
            assert!((out.affinity.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let fv = tape.constant(f.frames.clone());
        let e_a = encode_audio(&mut tape, fv, &vars).unwrap();
        let oh = tape.constant(phoneme_onehot(&s).unwrap());
        let e_t = encode_text(&mut tape, oh, &vars).unwrap();
        let (a, attn) = pattern_extract(&mut tape, e_t, e_a).unwrap();
        let prob = discriminate(&mut tape, attn, &vars).unwrap();
        assert_eq!(tape.value(prob).item().unwrap(), out.prob);
        assert_eq!(tape.value(a), &out.affinity);
        assert_eq!(tape.value(e_a), &out.e_a);

        let manual = softmax_rows(&{
            let logits = tape.value(e_t).matmul(&tape.value(e_a).transpose().unwrap()).unwrap();
            Tensor::new(logits.shape(), logits.data().iter().map(|v| v / 8f64.sqrt()).collect()).unwrap()
        })
        .unwrap();
        assert!(manual.max_abs_diff(&out.affinity) < 1e-12);

        let again = forward(&f, &s, &p).unwrap();
        assert_eq!(again.prob.to_bits(), out.prob.to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(small(), 11);
        let bytes = p.to_bytes();
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::from_bytes(&bad).is_err());
    }
}
