//! The interpolated multi-resolution CNN and the interpolated U-Net baseline.
//!
//! Both networks take a `1 x n x n` signed-distance image plus a list of
//! query points in the unit square and return one scalar per point. Feature
//! maps are sampled at the points with [`Tape::bilinear_gather`], so the
//! prediction at a point never depends on which other points are queried.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::scalar::{matmul, MatRef};
use crate::tensor::{bilinear_stencil, BnStats, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("architecture mismatch: checkpoint is `{found}`, expected `{expected}`")]
    Architecture { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrCnnConfig {
    /// Number of resolution levels whose features are interpolated.
    pub levels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub mlp_hidden: Vec<usize>,
    pub input_grid: usize,
}

impl Default for MrCnnConfig {
    fn default() -> Self {
        MrCnnConfig { levels: 6, channels: 20, kernel: 5, mlp_hidden: vec![96, 128, 96], input_grid: 64 }
    }
}

impl MrCnnConfig {
    pub fn with_levels(levels: usize) -> Self {
        MrCnnConfig { levels, ..Self::default() }
    }

    /// Width of the concatenated per-node feature vector.
    pub fn feature_width(&self) -> usize {
        self.levels * self.channels
    }

    fn validate(&self) -> Result<(), ModelError> {
        let g = self.input_grid;
        if g < 2 || !g.is_power_of_two() {
            return Err(ModelError::Config(format!("input grid {} must be a power of two >= 2", g)));
        }
        let max_levels = g.trailing_zeros() as usize;
        if self.levels == 0 || self.levels > max_levels {
            return Err(ModelError::Config(format!("levels must be in [1, {}], got {}", max_levels, self.levels)));
        }
        if self.kernel.is_multiple_of(2) || self.channels == 0 {
            return Err(ModelError::Config("kernel must be odd and channels nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub enc_channels: Vec<usize>,
    pub kernel: usize,
    pub input_grid: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { enc_channels: vec![12, 18, 24, 30, 36], kernel: 3, input_grid: 64 }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let g = self.input_grid;
        if self.enc_channels.is_empty() || !g.is_multiple_of(1 << self.levels()) {
            return Err(ModelError::Config(format!(
                "grid {} cannot be pooled {} times",
                g,
                self.levels()
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config("kernel must be odd".into()));
        }
        Ok(())
    }

    /// Output channels of decoder stage `i` (stage 0 is full resolution).
    fn dec_channels(&self, i: usize) -> usize {
        self.enc_channels[i.saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mrcnn(MrCnnConfig),
    Unet(UNetConfig),
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mrcnn(MrCnnConfig::default())
    }
}

/// Declared trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    KaimingUniform,
    /// Uniform in +-1/sqrt(fan_in).
    Bias,
    Ones,
    Zeros,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize) {
    let fan_in = c_in * k * k;
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![c_out, c_in, k, k], fan_in, init: Init::KaimingUniform });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![c_out], fan_in, init: Init::Bias });
}

fn dense_specs(out: &mut Vec<ParamSpec>, name: &str, f_in: usize, f_out: usize) {
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![f_out, f_in], fan_in: f_in, init: Init::KaimingUniform });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![f_out], fan_in: f_in, init: Init::Bias });
}

fn bn_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![c], fan_in: 1, init: Init::Ones });
    out.push(ParamSpec { name: format!("{name}.beta"), shape: vec![c], fan_in: 1, init: Init::Zeros });
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Architecture::Mrcnn(c) => c.validate(),
            Architecture::Unet(c) => c.validate(),
        }
    }

    pub fn input_grid(&self) -> usize {
        match self {
            Architecture::Mrcnn(c) => c.input_grid,
            Architecture::Unet(c) => c.input_grid,
        }
    }

    /// Stable textual identity of the architecture, checked when loading checkpoints.
    pub fn fingerprint(&self) -> String {
        match self {
            Architecture::Mrcnn(c) => format!(
                "mrcnn/levels={}/channels={}/kernel={}/mlp={}/grid={}",
                c.levels,
                c.channels,
                c.kernel,
                c.mlp_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-"),
                c.input_grid
            ),
            Architecture::Unet(c) => format!(
                "unet/enc={}/kernel={}/grid={}",
                c.enc_channels.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-"),
                c.kernel,
                c.input_grid
            ),
        }
    }

    /// Trainable tensors in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match self {
            Architecture::Mrcnn(c) => {
                for l in 0..c.levels {
                    let c_in = if l == 0 { 1 } else { c.channels };
                    conv_specs(&mut out, &format!("conv{l}"), c_in, c.channels, c.kernel);
                }
                let mut f_in = c.feature_width();
                for (j, &h) in c.mlp_hidden.iter().enumerate() {
                    dense_specs(&mut out, &format!("mlp{j}"), f_in, h);
                    f_in = h;
                }
                dense_specs(&mut out, "out", f_in, 1);
            }
            Architecture::Unet(c) => {
                let k = c.kernel;
                let mut c_in = 1;
                for (i, &ch) in c.enc_channels.iter().enumerate() {
                    conv_specs(&mut out, &format!("enc{i}.conv0"), c_in, ch, k);
                    bn_specs(&mut out, &format!("enc{i}.bn0"), ch);
                    conv_specs(&mut out, &format!("enc{i}.conv1"), ch, ch, k);
                    bn_specs(&mut out, &format!("enc{i}.bn1"), ch);
                    c_in = ch;
                }
                let mut below = *c.enc_channels.last().unwrap_or(&1);
                for i in (0..c.levels()).rev() {
                    let out_ch = c.dec_channels(i);
                    conv_specs(&mut out, &format!("dec{i}.conv"), below + c.enc_channels[i], out_ch, k);
                    bn_specs(&mut out, &format!("dec{i}.bn"), out_ch);
                    below = out_ch;
                }
                conv_specs(&mut out, "final", below, 1, k);
            }
        }
        out
    }

    /// Channel counts of the batch-norm layers in forward order.
    pub fn bn_channels(&self) -> Vec<usize> {
        match self {
            Architecture::Mrcnn(_) => Vec::new(),
            Architecture::Unet(c) => {
                let mut v: Vec<usize> = c.enc_channels.iter().flat_map(|&ch| [ch, ch]).collect();
                v.extend((0..c.levels()).rev().map(|i| c.dec_channels(i)));
                v
            }
        }
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Named trainable tensors plus non-trainable batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub bn_stats: Vec<BnStats<T>>,
}

/// Deterministic Kaiming-uniform initialization.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<ModelParams<T>, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = arch.param_specs();
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for s in specs {
        let t = match s.init {
            Init::KaimingUniform => {
                let bound = (6.0 / s.fan_in as f64).sqrt();
                Tensor::from_fn(s.shape.clone(), |_| T::from_f64(rng.gen_range(-bound..bound)))
            }
            Init::Bias => {
                let bound = 1.0 / (s.fan_in as f64).sqrt();
                Tensor::from_fn(s.shape.clone(), |_| T::from_f64(rng.gen_range(-bound..bound)))
            }
            Init::Ones => Tensor::full(s.shape.clone(), T::ONE),
            Init::Zeros => Tensor::zeros(s.shape.clone()),
        };
        names.push(s.name);
        tensors.push(t);
    }
    let bn_stats = arch.bn_channels().into_iter().map(BnStats::new).collect();
    Ok(ModelParams { arch: arch.clone(), names, tensors, bn_stats })
}

/// Sequential access to registered parameter handles.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Push every trainable tensor onto `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| BnStats {
                    mean: s.mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Record a forward pass. `vars` must come from [`ModelParams::register`].
    ///
    /// Returns an `N x 1` node of predictions. `training` switches batch
    /// normalization to per-sample statistics and updates the running stats.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        sdf: Var,
        pts: &[[f64; 2]],
        training: bool,
    ) -> Result<Var, ModelError> {
        let g = self.arch.input_grid();
        if tape.value(sdf).shape() != [1, g, g] {
            return Err(ModelError::Config(format!(
                "input grid {:?} does not match configured {}x{}",
                tape.value(sdf).shape(),
                g,
                g
            )));
        }
        if vars.len() != self.tensors.len() {
            return Err(ModelError::Config("parameter handles do not match model".into()));
        }
        let mut cur = Cursor { vars, pos: 0 };
        match &self.arch {
            Architecture::Mrcnn(c) => mrcnn_forward(c, tape, &mut cur, sdf, pts),
            Architecture::Unet(c) => {
                let c = c.clone();
                unet_forward(&c, tape, &mut cur, &mut self.bn_stats, sdf, pts, training)
            }
        }
    }

    /// Inference without gradient tracking. Returns one value per point.
    pub fn predict(&self, sdf: &Tensor<T>, pts: &[[f64; 2]]) -> Result<Vec<T>, ModelError> {
        let g = self.arch.input_grid();
        if sdf.shape() != [1, g, g] {
            return Err(ModelError::Config(format!("input grid {:?} does not match configured {}x{}", sdf.shape(), g, g)));
        }
        if pts.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(sdf.clone());
        let mut cur = Cursor { vars: &vars, pos: 0 };
        let out = match &self.arch {
            Architecture::Mrcnn(c) => return mrcnn_infer(c, &mut tape, &mut cur, x, pts),
            Architecture::Unet(c) => {
                let mut stats = self.bn_stats.clone();
                unet_forward(c, &mut tape, &mut cur, &mut stats, x, pts, false)?
            }
        };
        Ok(tape.value(out).data().to_vec())
    }
}

fn mrcnn_forward<T: Real>(
    c: &MrCnnConfig,
    tape: &mut Tape<T>,
    cur: &mut Cursor<'_>,
    sdf: Var,
    pts: &[[f64; 2]],
) -> Result<Var, ModelError> {
    let pad = c.kernel / 2;
    let mut x = sdf;
    let mut feats = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        if l > 0 {
            x = tape.maxpool2(x)?.0;
        }
        let (w, b) = (cur.next(), cur.next());
        x = tape.conv2d(x, w, b, pad)?;
        x = tape.relu(x);
        feats.push(tape.bilinear_gather(x, pts)?);
    }
    let mut h = tape.concat(&feats, 1)?;
    for _ in &c.mlp_hidden {
        let (w, b) = (cur.next(), cur.next());
        h = tape.dense(h, w, b)?;
        h = tape.relu(h);
    }
    let (w, b) = (cur.next(), cur.next());
    Ok(tape.dense(h, w, b)?)
}

/// Rows of the node-feature matrix pushed through the MLP at a time.
const INFER_CHUNK: usize = 256;

/// Pixel-major copy of a `C x H x W` map, so a pixel's channels are contiguous.
fn pixel_major<T: Real>(f: &Tensor<T>) -> Vec<T> {
    let (ch, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let mut t = vec![T::ZERO; ch * hw];
    for (k, plane) in f.data().chunks(hw).enumerate() {
        for (q, &v) in plane.iter().enumerate() {
            t[q * ch + k] = v;
        }
    }
    t
}

/// Add `sum_corners w * data[corner]` to `dst`, rows of `dst.len()` values.
fn gather_add<T: Real>(dst: &mut [T], data: &[T], idx: [usize; 4], wt: [f64; 4]) {
    let k = dst.len();
    let row = |q: usize| &data[q * k..(q + 1) * k];
    let (s0, s1, s2, s3) = (row(idx[0]), row(idx[1]), row(idx[2]), row(idx[3]));
    let [a0, a1, a2, a3] = wt.map(T::from_f64);
    for ((((d, &x0), &x1), &x2), &x3) in dst.iter_mut().zip(s0).zip(s1).zip(s2).zip(s3) {
        *d += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
    }
}

/// Inference-only MR-CNN, numerically equivalent to the recorded forward.
///
/// Interpolation and the first dense layer are both linear, so for the
/// pooled levels the first layer is applied to the coarse maps once and the
/// projected maps are interpolated instead. Level 0 has more pixels than a
/// typical mesh has nodes and is interpolated first. Which levels are
/// projected never depends on the query points.
fn mrcnn_infer<T: Real>(
    c: &MrCnnConfig,
    tape: &mut Tape<T>,
    cur: &mut Cursor<'_>,
    sdf: Var,
    pts: &[[f64; 2]],
) -> Result<Vec<T>, ModelError> {
    let pad = c.kernel / 2;
    let mut x = sdf;
    let mut maps = Vec::with_capacity(c.levels);
    for l in 0..c.levels {
        if l > 0 {
            x = tape.maxpool2(x)?.0;
        }
        let (w, b) = (cur.next(), cur.next());
        x = tape.conv2d(x, w, b, pad)?;
        x = tape.relu(x);
        maps.push(x);
    }
    let mut layers = Vec::with_capacity(c.mlp_hidden.len() + 1);
    for _ in 0..=c.mlp_hidden.len() {
        let (w, b) = (cur.next(), cur.next());
        layers.push((tape.value(w), tape.value(b).data()));
    }
    let ch = c.channels;
    let (w1, b1) = layers[0];
    let f1 = w1.shape()[0];
    let width = c.feature_width();
    // column block of the first weight matrix belonging to level l: f1 x ch
    let block = |l: usize| -> Vec<T> {
        w1.data().chunks(width).flat_map(|row| row[l * ch..(l + 1) * ch].iter().copied()).collect()
    };
    let base = pixel_major(tape.value(maps[0]));
    let base_w = block(0);
    let projected: Vec<(Vec<T>, usize, usize)> = maps[1..]
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let f = tape.value(m);
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let mut proj = vec![T::ZERO; h * w * f1];
            matmul(MatRef::t(f.data(), ch, h * w), MatRef::t(&block(i + 1), f1, ch), &mut proj, false);
            (proj, h, w)
        })
        .collect();
    let g = c.input_grid;

    let widest = c.mlp_hidden.iter().copied().chain([f1, 1]).max().unwrap_or(f1);
    let mut feat = vec![T::ZERO; INFER_CHUNK * ch];
    let mut cur_buf = vec![T::ZERO; INFER_CHUNK * widest];
    let mut next_buf = vec![T::ZERO; INFER_CHUNK * widest];
    let mut out = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(INFER_CHUNK) {
        let n = chunk.len();
        for (i, p) in chunk.iter().enumerate() {
            let row = &mut feat[i * ch..(i + 1) * ch];
            row.iter_mut().for_each(|v| *v = T::ZERO);
            let (idx, wt) = bilinear_stencil(p[0], p[1], g, g)?;
            gather_add(row, &base, idx, wt);
            let h = &mut cur_buf[i * f1..(i + 1) * f1];
            h.copy_from_slice(b1);
            for (proj, ph, pw) in &projected {
                let (idx, wt) = bilinear_stencil(p[0], p[1], *ph, *pw)?;
                gather_add(h, proj, idx, wt);
            }
        }
        matmul(MatRef::new(&feat[..n * ch], n, ch), MatRef::t(&base_w, f1, ch), &mut cur_buf[..n * f1], true);
        let mut f_in = f1;
        for (li, (w, b)) in layers.iter().enumerate() {
            if li > 0 {
                let f_out = w.shape()[0];
                let dst = &mut next_buf[..n * f_out];
                for r in dst.chunks_mut(f_out) {
                    r.copy_from_slice(b);
                }
                matmul(MatRef::new(&cur_buf[..n * f_in], n, f_in), MatRef::t(w.data(), f_out, f_in), dst, true);
                std::mem::swap(&mut cur_buf, &mut next_buf);
                f_in = f_out;
            }
            if li + 1 < layers.len() {
                cur_buf[..n * f_in].iter_mut().for_each(|v| *v = if *v > T::ZERO { *v } else { T::ZERO });
            }
        }
        out.extend_from_slice(&cur_buf[..n]);
    }
    Ok(out)
}

fn conv_relu_bn<T: Real>(
    tape: &mut Tape<T>,
    cur: &mut Cursor<'_>,
    stats: &mut BnStats<T>,
    x: Var,
    pad: usize,
    training: bool,
) -> Result<Var, ModelError> {
    let (w, b) = (cur.next(), cur.next());
    let y = tape.conv2d(x, w, b, pad)?;
    let y = tape.relu(y);
    let (gamma, beta) = (cur.next(), cur.next());
    Ok(tape.batch_norm2d(y, gamma, beta, stats, training)?)
}

fn unet_forward<T: Real>(
    c: &UNetConfig,
    tape: &mut Tape<T>,
    cur: &mut Cursor<'_>,
    stats: &mut [BnStats<T>],
    sdf: Var,
    pts: &[[f64; 2]],
    training: bool,
) -> Result<Var, ModelError> {
    let pad = c.kernel / 2;
    let mut bn = stats.iter_mut();
    let mut next_bn = move || bn.next().expect("batch-norm buffers match architecture");
    let mut x = sdf;
    let mut skips = Vec::with_capacity(c.levels());
    for _ in 0..c.levels() {
        x = conv_relu_bn(tape, cur, next_bn(), x, pad, training)?;
        x = conv_relu_bn(tape, cur, next_bn(), x, pad, training)?;
        let (pooled, idx) = tape.maxpool2(x)?;
        skips.push((x, idx));
        x = pooled;
    }
    for (skip, idx) in skips.iter().rev() {
        let up = tape.max_unpool2(x, idx)?;
        let cat = tape.concat(&[up, *skip], 0)?;
        x = conv_relu_bn(tape, cur, next_bn(), cat, pad, training)?;
    }
    let (w, b) = (cur.next(), cur.next());
    let out = tape.conv2d(x, w, b, pad)?;
    Ok(tape.bilinear_gather(out, pts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_count(f_in: usize, hidden: &[usize]) -> usize {
        let mut total = 0;
        let mut prev = f_in;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            total += prev * h + h;
            prev = h;
        }
        total
    }

    #[test]
    fn level_one_conv_and_mlp_counts() {
        let specs = Architecture::default().param_specs();
        let conv0: usize = specs[..2].iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(conv0, 20 * (25 + 1));
        assert_eq!(mlp_count(120, &[96, 128, 96]), 120 * 96 + 96 + 96 * 128 + 128 + 128 * 96 + 96 + 96 + 1);
        assert_eq!(mlp_count(120, &[96, 128, 96]), 36_513);
    }

    #[test]
    fn per_level_increment_is_constant() {
        for l in 2..=6 {
            let a = Architecture::Mrcnn(MrCnnConfig::with_levels(l)).param_count();
            let b = Architecture::Mrcnn(MrCnnConfig::with_levels(l - 1)).param_count();
            assert_eq!(a - b, 11_940);
        }
        assert_eq!(MrCnnConfig::default().feature_width(), 120);
    }

    #[test]
    fn unet_count_near_reference() {
        let n = Architecture::Unet(UNetConfig::default()).param_count() as f64;
        assert!((n - 99_217.0).abs() / 99_217.0 < 0.1, "{}", n);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Architecture::Mrcnn(MrCnnConfig::with_levels(7)).validate().is_err());
        assert!(Architecture::Mrcnn(MrCnnConfig::with_levels(0)).validate().is_err());
        let bad = UNetConfig { enc_channels: vec![4; 7], ..UNetConfig::default() };
        assert!(Architecture::Unet(bad).validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = Architecture::default();
        let a: ModelParams<f64> = init_params(&arch, 1).unwrap();
        let b: ModelParams<f64> = init_params(&arch, 1).unwrap();
        let c: ModelParams<f64> = init_params(&arch, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (spec, t) in arch.param_specs().iter().zip(&a.tensors) {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= bound));
        }
    }

    fn sdf_like(n: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, n, n], |i| {
            let (r, c) = ((i / n) as f64 / (n - 1) as f64, (i % n) as f64 / (n - 1) as f64);
            0.5 - ((r - 0.5).powi(2) + (c - 0.5).powi(2)).sqrt()
        })
    }

    #[test]
    fn mrcnn_output_length_and_permutation() {
        let arch = Architecture::Mrcnn(MrCnnConfig { levels: 3, input_grid: 16, ..MrCnnConfig::default() });
        let p: ModelParams<f64> = init_params(&arch, 4).unwrap();
        let sdf = sdf_like(16);
        let pts = vec![[0.1, 0.2], [0.9, 0.4], [0.5, 0.5], [1.0, 1.0], [0.0, 0.3]];
        let out = p.predict(&sdf, &pts).unwrap();
        assert_eq!(out.len(), 5);
        let rev: Vec<_> = pts.iter().rev().copied().collect();
        let out_rev = p.predict(&sdf, &rev).unwrap();
        for i in 0..5 {
            assert!((out[i] - out_rev[4 - i]).abs() < 1e-12);
            let single = p.predict(&sdf, &pts[i..i + 1]).unwrap();
            assert!((single[0] - out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_inference_matches_recorded_forward() {
        for levels in [1, 3, 6] {
            let arch = Architecture::Mrcnn(MrCnnConfig::with_levels(levels));
            let mut p: ModelParams<f64> = init_params(&arch, levels as u64).unwrap();
            let sdf = sdf_like(64);
            let pts: Vec<[f64; 2]> = (0..300).map(|i| [(i as f64 * 0.618).fract(), (i as f64 * 0.377).fract()]).collect();
            let fast = p.predict(&sdf, &pts).unwrap();
            let mut tape = Tape::new();
            let vars = p.register(&mut tape, false);
            let x = tape.constant(sdf.clone());
            let y = p.forward(&mut tape, &vars, x, &pts, false).unwrap();
            for (a, b) in fast.iter().zip(tape.value(y).data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "levels {}: {} vs {}", levels, a, b);
            }
        }
    }

    #[test]
    fn f32_prediction_is_independent_of_batch() {
        let p: ModelParams<f32> = init_params(&Architecture::default(), 2).unwrap();
        let sdf = sdf_like(64).cast::<f32>();
        let pts: Vec<[f64; 2]> = (0..700).map(|i| [(i as f64 * 0.618).fract(), (i as f64 * 0.377).fract()]).collect();
        let all = p.predict(&sdf, &pts).unwrap();
        for i in [0, 1, 255, 256, 511, 699] {
            assert_eq!(p.predict(&sdf, &pts[i..i + 1]).unwrap()[0].to_bits(), all[i].to_bits());
            assert_eq!(p.predict(&sdf, &pts[i..]).unwrap()[0].to_bits(), all[i].to_bits());
        }
    }

    #[test]
    fn unet_eval_is_deterministic_and_sized() {
        let arch = Architecture::Unet(UNetConfig { enc_channels: vec![3, 4], kernel: 3, input_grid: 8 });
        let p: ModelParams<f64> = init_params(&arch, 9).unwrap();
        let sdf = sdf_like(8);
        let pts = vec![[0.3, 0.3], [0.7, 0.1], [0.2, 0.9]];
        let a = p.predict(&sdf, &pts).unwrap();
        let b = p.predict(&sdf, &pts).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_grid_is_shape_error() {
        let p: ModelParams<f64> = init_params(&Architecture::default(), 0).unwrap();
        assert!(p.predict(&sdf_like(32), &[[0.5, 0.5]]).is_err());
    }
}
