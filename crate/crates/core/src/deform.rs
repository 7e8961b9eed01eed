//! Time-conditioned residual deformation of reposed asset Gaussians.
//!
//! The field is a small MLP over frequency-encoded position and time. Its
//! output heads start at zero so an untrained field is the identity.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_vjp, Quat};
use crate::gradients::render_reposed;
use crate::image::RgbImage;
use crate::losses;
use crate::rasterizer::{RasterConfig, RenderGrad, RenderOutput};
use crate::scene::{Camera, GaussianSet, Layer, SkinnedMesh};
use crate::skinning::{repose_all, Pose, PosedMesh, ReposedGaussian};

use std::f64::consts::PI;

pub const POSITION_BANDS: usize = 6;
pub const TIME_BANDS: usize = 4;
pub const INPUT_DIM: usize = 3 * (1 + 2 * POSITION_BANDS) + (1 + 2 * TIME_BANDS);
pub const HIDDEN: usize = 128;
pub const DEPTH: usize = 4;
/// Hidden layer (1-based) that also receives the raw encoding.
pub const SKIP_LAYER: usize = 3;
/// Δposition, Δrotation, Δlog-scale.
pub const OUTPUT_DIM: usize = 10;

const FORMAT: &str = "avsplat-deform";
const VERSION: u32 = 1;

/// Writes the encoding of `(p, t)` into `out` (length [`INPUT_DIM`]).
pub fn encode(p: &[f64; 3], t: f64, out: &mut [f64]) {
    let mut k = 0;
    for &x in p {
        out[k] = x;
        k += 1;
        for b in 0..POSITION_BANDS {
            let w = PI * (1u32 << b) as f64;
            out[k] = (w * x).sin();
            out[k + 1] = (w * x).cos();
            k += 2;
        }
    }
    out[k] = t;
    k += 1;
    for b in 0..TIME_BANDS {
        let w = PI * (1u32 << b) as f64;
        out[k] = (w * t).sin();
        out[k + 1] = (w * t).cos();
        k += 2;
    }
}

fn encode_dt(t: f64, out: &mut [f64]) {
    out.fill(0.0);
    let mut k = 3 * (1 + 2 * POSITION_BANDS);
    out[k] = 1.0;
    k += 1;
    for b in 0..TIME_BANDS {
        let w = PI * (1u32 << b) as f64;
        out[k] = w * (w * t).cos();
        out[k + 1] = -w * (w * t).sin();
        k += 2;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    /// Hidden layers followed by the output head.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub seed: u64,
}

/// One output row of the field.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Delta {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

impl Delta {
    fn from_slice(v: &[f64]) -> Self {
        Self {
            position: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5], v[6]],
            log_scale: [v[7], v[8], v[9]],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position.iter().chain(&self.rotation).chain(&self.log_scale).all(|&v| v == 0.0)
    }
}

struct Tape {
    /// Inputs to each layer (the skip layer's includes the encoding).
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

fn layer_input_dim(l: usize) -> usize {
    match l {
        0 => INPUT_DIM,
        l if l + 1 == SKIP_LAYER => HIDDEN + INPUT_DIM,
        _ => HIDDEN,
    }
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

impl DeformField {
    /// Hidden layers get Xavier-uniform weights from `seed`; every head
    /// weight and bias is zero.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..DEPTH {
            let fan_in = layer_input_dim(l);
            let a = (6.0 / (fan_in + HIDDEN) as f64).sqrt();
            weights.push(DMatrix::from_fn(HIDDEN, fan_in, |_, _| rng.random_range(-a..a)));
            biases.push(DVector::zeros(HIDDEN));
        }
        weights.push(DMatrix::zeros(OUTPUT_DIM, HIDDEN));
        biases.push(DVector::zeros(OUTPUT_DIM));
        Self { weights, biases, seed }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn affine(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[l] * x;
        for mut c in z.column_iter_mut() {
            c += &self.biases[l];
        }
        z
    }

    fn run(&self, x: &DMatrix<f64>) -> Tape {
        let mut inputs = Vec::with_capacity(DEPTH + 1);
        let mut pre = Vec::with_capacity(DEPTH);
        let mut h = x.clone();
        for l in 0..DEPTH {
            let input = if l + 1 == SKIP_LAYER { stack(&h, x) } else { h };
            let z = self.affine(l, &input);
            h = z.map(silu);
            inputs.push(input);
            pre.push(z);
        }
        let out = self.affine(DEPTH, &h);
        inputs.push(h);
        Tape { inputs, pre, out }
    }

    /// Raw head outputs for encoded inputs, one column per sample.
    pub fn forward_encoded(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.run(x).out
    }

    /// Output for a single position and time.
    pub fn eval(&self, p: &[f64; 3], t: f64) -> Delta {
        let mut x = DMatrix::zeros(INPUT_DIM, 1);
        encode(p, t, x.as_mut_slice());
        Delta::from_slice(self.forward_encoded(&x).as_slice())
    }

    /// Derivative of every output with respect to `t`, by forward-mode
    /// differentiation.
    pub fn time_derivative(&self, p: &[f64; 3], t: f64) -> [f64; OUTPUT_DIM] {
        let mut x = DVector::zeros(INPUT_DIM);
        encode(p, t, x.as_mut_slice());
        let mut dx = DVector::zeros(INPUT_DIM);
        encode_dt(t, dx.as_mut_slice());
        let (mut h, mut dh) = (x.clone(), dx.clone());
        for l in 0..DEPTH {
            let (input, d_input) = if l + 1 == SKIP_LAYER {
                (
                    DVector::from_iterator(HIDDEN + INPUT_DIM, h.iter().chain(x.iter()).copied()),
                    DVector::from_iterator(HIDDEN + INPUT_DIM, dh.iter().chain(dx.iter()).copied()),
                )
            } else {
                (h, dh)
            };
            let z = &self.weights[l] * &input + &self.biases[l];
            let dz = &self.weights[l] * &d_input;
            h = z.map(silu);
            dh = dz.zip_map(&z, |d, z| d * silu_grad(z));
        }
        let d_out = &self.weights[DEPTH] * dh;
        let mut r = [0.0; OUTPUT_DIM];
        r.copy_from_slice(d_out.as_slice());
        r
    }

    /// Parameter gradients given `dL/d(out)` for the batch in `x`.
    fn backward(&self, tape: &Tape, d_out: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let mut gw = vec![DMatrix::zeros(0, 0); DEPTH + 1];
        let mut gb = vec![DVector::zeros(0); DEPTH + 1];
        gw[DEPTH] = d_out * tape.inputs[DEPTH].transpose();
        gb[DEPTH] = d_out.column_sum();
        let mut dh = self.weights[DEPTH].transpose() * d_out;
        for l in (0..DEPTH).rev() {
            let dz = dh.zip_map(&tape.pre[l], |d, z| d * silu_grad(z));
            gw[l] = &dz * tape.inputs[l].transpose();
            gb[l] = dz.column_sum();
            if l == 0 {
                break;
            }
            let d_in = self.weights[l].transpose() * &dz;
            dh = if l + 1 == SKIP_LAYER {
                d_in.rows(0, HIDDEN).into_owned()
            } else {
                d_in
            };
        }
        (gw, gb)
    }

    /// Flat parameter vector: each layer's weights (column-major) then its
    /// bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    /// Inverse of [`DeformField::params`].
    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a field of {}",
                v.len(),
                self.param_count()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&v[k..k + n]);
            k += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&v[k..k + n]);
            k += n;
        }
        Ok(())
    }

    /// JSON header line followed by the parameters as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            input_dim: INPUT_DIM,
            hidden: vec![HIDDEN; DEPTH],
            skip_layer: SKIP_LAYER,
            position_bands: POSITION_BANDS,
            time_bands: TIME_BANDS,
            outputs: vec![3, 4, 3],
            activation: "silu".into(),
            seed: self.seed,
            param_count: self.param_count(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.format != FORMAT {
            return Err(Error::MalformedHeader(format!("unexpected format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: VERSION,
            });
        }
        let mut field = DeformField::new(header.seed);
        if header.input_dim != INPUT_DIM
            || header.hidden != vec![HIDDEN; DEPTH]
            || header.skip_layer != SKIP_LAYER
            || header.position_bands != POSITION_BANDS
            || header.time_bands != TIME_BANDS
            || header.outputs != [3, 4, 3]
            || header.activation != "silu"
            || header.param_count != field.param_count()
        {
            return Err(Error::MalformedHeader("unsupported network shape".into()));
        }
        let body = &bytes[nl + 1..];
        if body.len() != 8 * header.param_count {
            return Err(Error::MalformedHeader(format!(
                "expected {} parameter bytes, found {}",
                8 * header.param_count,
                body.len()
            )));
        }
        let v: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        field.set_params(&v)?;
        Ok(field)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    input_dim: usize,
    hidden: Vec<usize>,
    skip_layer: usize,
    position_bands: usize,
    time_bands: usize,
    outputs: Vec<usize>,
    activation: String,
    seed: u64,
    param_count: usize,
}

fn apply_delta(g: &ReposedGaussian, d: &Delta) -> ReposedGaussian {
    if d.is_zero() {
        return *g;
    }
    let [rw, rx, ry, rz] = d.rotation;
    let dq = Quat::new(1.0 + rw, rx, ry, rz).normalized();
    ReposedGaussian {
        position: g.position + nalgebra::Vector3::from(d.position),
        rotation: dq.mul(&g.rotation),
        scale: g.scale.component_mul(&nalgebra::Vector3::from(d.log_scale).map(f64::exp)),
    }
}

fn encode_assets(set: &GaussianSet, reposed: &[ReposedGaussian], t: f64) -> (Vec<usize>, DMatrix<f64>) {
    let assets = set.indices_in(Layer::Asset);
    let mut x = DMatrix::zeros(INPUT_DIM, assets.len());
    for (c, &i) in assets.iter().enumerate() {
        encode(&reposed[i].position.into(), t, x.column_mut(c).as_mut_slice());
    }
    (assets, x)
}

/// Adds the field's residual to every asset Gaussian; body Gaussians pass
/// through unchanged.
pub fn apply_deform(field: &DeformField, set: &GaussianSet, reposed: &[ReposedGaussian], t: f64) -> Vec<ReposedGaussian> {
    let (assets, x) = encode_assets(set, reposed, t);
    let out = field.forward_encoded(&x);
    let mut r = reposed.to_vec();
    for (c, &i) in assets.iter().enumerate() {
        r[i] = apply_delta(&reposed[i], &Delta::from_slice(out.column(c).as_slice()));
    }
    r
}

/// Renders every pose of a sequence from every camera.
pub fn animate(
    set: &GaussianSet,
    mesh: &SkinnedMesh,
    poses: &[Pose],
    times: &[f64],
    field: Option<&DeformField>,
    cams: &[Camera],
    raster: &RasterConfig,
) -> Result<Vec<Vec<RenderOutput>>> {
    if poses.len() != times.len() {
        return Err(Error::ShapeMismatch(format!("{} poses for {} times", poses.len(), times.len())));
    }
    poses
        .iter()
        .zip(times)
        .map(|(pose, &t)| {
            let posed = PosedMesh::posed(mesh, pose)?;
            let mut reposed = repose_all(set, &posed)?;
            if let Some(f) = field {
                reposed = apply_deform(f, set, &reposed, t);
            }
            Ok(cams
                .iter()
                .map(|c| render_reposed(set, &reposed, None, c, raster).0)
                .collect())
        })
        .collect()
}

// ---------------------------------------------------------------- training

/// One reference-video frame.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub t: f64,
    pub pose: Pose,
    pub camera: Camera,
    pub image: RgbImage,
}

/// An extra posed view of frame `frame`.
#[derive(Clone, Debug)]
pub struct AuxView {
    pub frame: usize,
    pub camera: Camera,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    pub iters: usize,
    pub lr: f64,
    /// Learning rate reached at the last iteration, decayed geometrically.
    pub lr_final: f64,
    pub w_ref: f64,
    pub w_aux: f64,
    pub raster: RasterConfig,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 1e-3,
            lr_final: 1e-4,
            w_ref: 1.0,
            w_aux: 1.0,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformReport {
    /// Mean reference loss over all frames before and after training.
    pub initial_ref: f64,
    pub final_ref: f64,
    /// `(iteration, reference loss, auxiliary loss)` per step.
    pub log: Vec<(usize, f64, f64)>,
}

struct FrameCache {
    reposed: Vec<ReposedGaussian>,
    x: DMatrix<f64>,
}

fn image_of(r: &RenderOutput) -> RgbImage {
    RgbImage {
        width: r.width,
        height: r.height,
        data: r.color.clone(),
    }
}

/// Gradient of the loss with respect to the field's raw outputs for one
/// asset, from the gradient at its deformed placement.
fn delta_vjp(g: &ReposedGaussian, d: &Delta, out: &ReposedGaussian, grad: &crate::skinning::ReposedGrad) -> [f64; OUTPUT_DIM] {
    let [rw, rx, ry, rz] = d.rotation;
    let raw = Quat::new(1.0 + rw, rx, ry, rz);
    let dq = raw.normalized();
    let (d_dq, _) = dq.mul_vjp(&g.rotation, &grad.rotation);
    let d_raw = normalize_vjp(&raw, &d_dq);
    let mut r = [0.0; OUTPUT_DIM];
    for k in 0..3 {
        r[k] = grad.position[k];
        r[7 + k] = grad.scale[k] * out.scale[k];
    }
    r[3..7].copy_from_slice(&d_raw);
    r
}

/// Unweighted loss per target and the weighted parameter gradient for one
/// frame. `base` is the undeformed reposed set and `x` its asset encoding.
fn step_gradient(
    field: &DeformField,
    set: &GaussianSet,
    base: &[ReposedGaussian],
    x: &DMatrix<f64>,
    assets: &[usize],
    targets: &[(&Camera, &RgbImage, f64)],
    raster: &RasterConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = field.run(x);
    let deltas: Vec<Delta> = (0..assets.len()).map(|k| Delta::from_slice(tape.out.column(k).as_slice())).collect();
    let mut deformed = base.to_vec();
    for (k, &i) in assets.iter().enumerate() {
        deformed[i] = apply_delta(&base[i], &deltas[k]);
    }
    let mut d_out = DMatrix::zeros(OUTPUT_DIM, assets.len());
    let mut values = Vec::with_capacity(targets.len());
    for &(cam, img, w) in targets {
        let (out, record) = render_reposed(set, &deformed, None, cam, raster);
        let (l, g) = losses::loss_ref_grad(&[image_of(&out)], std::slice::from_ref(img))?;
        values.push(l);
        let mut up = RenderGrad::zeros(out.width, out.height);
        up.color = g.into_iter().next().expect("one frame");
        for v in up.color.iter_mut() {
            *v *= w;
        }
        let rg = crate::gradients::backward_reposed(set, &record, raster, &up)?;
        let cols: Vec<[f64; OUTPUT_DIM]> = assets
            .par_iter()
            .enumerate()
            .map(|(k, &i)| delta_vjp(&base[i], &deltas[k], &deformed[i], &rg.reposed[i]))
            .collect();
        for (k, c) in cols.iter().enumerate() {
            for (j, v) in c.iter().enumerate() {
                d_out[(j, k)] += v;
            }
        }
    }
    let (gw, gb) = field.backward(&tape, &d_out);
    let mut grad = Vec::with_capacity(field.param_count());
    for (w, b) in gw.iter().zip(&gb) {
        grad.extend_from_slice(w.as_slice());
        grad.extend_from_slice(b.as_slice());
    }
    Ok((values, grad))
}

/// Weighted reconstruction loss of one posed frame over `targets`, and its
/// gradient with respect to [`DeformField::params`].
pub fn frame_loss_grad(
    field: &DeformField,
    set: &GaussianSet,
    mesh: &SkinnedMesh,
    pose: &Pose,
    t: f64,
    targets: &[(&Camera, &RgbImage, f64)],
    raster: &RasterConfig,
) -> Result<(f64, Vec<f64>)> {
    let posed = PosedMesh::posed(mesh, pose)?;
    let base = repose_all(set, &posed)?;
    let (assets, x) = encode_assets(set, &base, t);
    let (values, grad) = step_gradient(field, set, &base, &x, &assets, targets, raster)?;
    let loss = values.iter().zip(targets).map(|(l, t)| l * t.2).sum();
    Ok((loss, grad))
}

/// Trains a fresh field against reference frames and optional auxiliary
/// views. Gaussian parameters are left untouched.
pub fn train_deform(
    set: &GaussianSet,
    mesh: &SkinnedMesh,
    frames: &[FrameSample],
    aux: &[AuxView],
    cfg: &DeformConfig,
    seed: u64,
) -> Result<(DeformField, DeformReport)> {
    if !(cfg.lr > 0.0 && cfg.lr_final > 0.0) || !(cfg.w_ref >= 0.0 && cfg.w_aux >= 0.0) {
        return Err(Error::InvalidConfig("deform learning rates must be positive, weights non-negative".into()));
    }
    if frames.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            available: frames.len(),
        });
    }
    for w in frames.windows(2) {
        if !(w[1].t > w[0].t) {
            return Err(Error::InvalidArgument("frame times must increase strictly".into()));
        }
    }
    if frames.iter().any(|f| !(0.0..=1.0).contains(&f.t)) {
        return Err(Error::InvalidArgument("frame times must lie in [0, 1]".into()));
    }
    if let Some(a) = aux.iter().find(|a| a.frame >= frames.len()) {
        return Err(Error::InvalidArgument(format!("auxiliary view refers to frame {}", a.frame)));
    }
    for (cam, img) in frames.iter().map(|f| (&f.camera, &f.image)).chain(aux.iter().map(|a| (&a.camera, &a.image))) {
        img.check_same_size(cam.width as usize, cam.height as usize)?;
    }

    let mut assets = Vec::new();
    let caches: Vec<FrameCache> = frames
        .iter()
        .map(|f| {
            let posed = PosedMesh::posed(mesh, &f.pose)?;
            let reposed = repose_all(set, &posed)?;
            let (a, x) = encode_assets(set, &reposed, f.t);
            assets = a;
            Ok(FrameCache { reposed, x })
        })
        .collect::<Result<_>>()?;
    let aux_of: Vec<Vec<usize>> = (0..frames.len())
        .map(|f| (0..aux.len()).filter(|&a| aux[a].frame == f).collect())
        .collect();

    let mut field = DeformField::new(seed);
    let mean_ref = |field: &DeformField| -> Result<f64> {
        let mut total = 0.0;
        for (f, c) in frames.iter().zip(&caches) {
            let out = field.forward_encoded(&c.x);
            let mut r = c.reposed.clone();
            for (k, &i) in assets.iter().enumerate() {
                r[i] = apply_delta(&c.reposed[i], &Delta::from_slice(out.column(k).as_slice()));
            }
            let img = image_of(&render_reposed(set, &r, None, &f.camera, &cfg.raster).0);
            total += losses::loss_ref(&[img], std::slice::from_ref(&f.image))?;
        }
        Ok(total / frames.len() as f64)
    };
    let initial_ref = mean_ref(&field)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n_params = field.param_count();
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let f = rng.random_range(0..frames.len());
        let cache = &caches[f];
        let mut targets = vec![(&frames[f].camera, &frames[f].image, cfg.w_ref)];
        if !aux_of[f].is_empty() && cfg.w_aux > 0.0 {
            let a = &aux[aux_of[f][rng.random_range(0..aux_of[f].len())]];
            targets.push((&a.camera, &a.image, cfg.w_aux));
        }
        let (losses, grad) = step_gradient(&field, set, &cache.reposed, &cache.x, &assets, &targets, &cfg.raster)?;
        log.push((it, losses[0], losses.get(1).copied().unwrap_or(0.0)));

        let step = (it + 1) as i32;
        let (c1, c2) = (1.0 - 0.9f64.powi(step), 1.0 - 0.999f64.powi(step));
        let frac = if cfg.iters > 1 { it as f64 / (cfg.iters - 1) as f64 } else { 0.0 };
        let lr = cfg.lr * (cfg.lr_final / cfg.lr).powf(frac);
        let mut p = field.params();
        for j in 0..n_params {
            m[j] = 0.9 * m[j] + 0.1 * grad[j];
            v[j] = 0.999 * v[j] + 0.001 * grad[j] * grad[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-15);
        }
        field.set_params(&p)?;
    }
    let final_ref = mean_ref(&field)?;
    Ok((
        field,
        DeformReport {
            initial_ref,
            final_ref,
            log,
        },
    ))
}
