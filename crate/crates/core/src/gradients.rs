//! Scene-level differentiable rendering and the finite-difference checker.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{MaskImage, RgbImage};
use crate::losses::{self, LossWeights};
use crate::rasterizer::{
    project, project_vjp, rasterize, rasterize_backward, Appearance, RasterConfig, RasterRecord,
    RenderGrad, RenderOutput, Splat2D, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE,
};
use crate::scene::{Camera, GaussianSet, Identity, SkinnedMesh, IDENTITY_DIM};
use crate::sdf::MeshSdf;
use crate::skinning::{repose_all, repose_vjp, PosedMesh, Pose, ReposedGaussian, ReposedGrad};

/// Gradients shaped like the optimizable fields of a [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub offsets: Vec<[f64; 3]>,
    /// With respect to the stored (unnormalized) quaternion; orthogonal to it.
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub identity: Vec<Identity>,
}

impl ParamGradients {
    pub fn zeros(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            offsets: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
            sh: vec![0.0; set.sh.len()],
            identity: vec![[0.0; IDENTITY_DIM]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, w: f64) -> Result<()> {
        if other.len() != self.len() || other.sh.len() != self.sh.len() {
            return Err(Error::ShapeMismatch("gradient buffers differ in shape".into()));
        }
        fn axpy<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], w: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += w * y[k];
                }
            }
        }
        axpy(&mut self.offsets, &other.offsets, w);
        axpy(&mut self.rotation, &other.rotation, w);
        axpy(&mut self.log_scale, &other.log_scale, w);
        axpy(&mut self.identity, &other.identity, w);
        for (x, y) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *x += w * y;
        }
        for (x, y) in self.sh.iter_mut().zip(&other.sh) {
            *x += w * y;
        }
        Ok(())
    }

    /// Clears every row belonging to a frozen Gaussian.
    pub fn zero_frozen(&mut self, set: &GaussianSet) {
        let stride = set.sh_stride();
        for i in (0..set.len()).filter(|&i| set.frozen[i]) {
            self.offsets[i] = [0.0; 3];
            self.rotation[i] = [0.0; 4];
            self.log_scale[i] = [0.0; 3];
            self.opacity_logit[i] = 0.0;
            self.sh[i * stride..(i + 1) * stride].fill(0.0);
            self.identity[i] = [0.0; IDENTITY_DIM];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.offsets.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.identity.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
    }

    /// Adds world-position gradients, chained through the embedding.
    pub fn add_position_grads(
        &mut self,
        set: &GaussianSet,
        posed: &PosedMesh,
        d_position: &[Vector3<f64>],
    ) -> Result<()> {
        for (i, d) in d_position.iter().enumerate() {
            if *d == Vector3::zeros() {
                continue;
            }
            let g = ReposedGrad {
                position: *d,
                ..Default::default()
            };
            let t = posed.transport(set.face[i])?;
            let (d_off, _, _) = repose_vjp(set, i, t, &g);
            for k in 0..3 {
                self.offsets[i][k] += d_off[k];
            }
        }
        Ok(())
    }

    pub fn get(&self, coord: &Coord, stride: usize) -> f64 {
        let i = coord.gaussian;
        match coord.param {
            ParamKind::Offset => self.offsets[i][coord.component],
            ParamKind::Rotation => self.rotation[i][coord.component],
            ParamKind::LogScale => self.log_scale[i][coord.component],
            ParamKind::Opacity => self.opacity_logit[i],
            ParamKind::Sh => self.sh[i * stride + coord.component],
            ParamKind::Identity => self.identity[i][coord.component],
        }
    }
}

/// Gradients with respect to world-placed Gaussians plus their appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct ReposedGradients {
    pub reposed: Vec<ReposedGrad>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub identity: Vec<Identity>,
}

impl ReposedGradients {
    pub fn zeros(set: &GaussianSet) -> Self {
        Self {
            reposed: vec![ReposedGrad::default(); set.len()],
            opacity_logit: vec![0.0; set.len()],
            sh: vec![0.0; set.sh.len()],
            identity: vec![[0.0; IDENTITY_DIM]; set.len()],
        }
    }
}

fn appearance<'a>(set: &'a GaussianSet, i: usize) -> Appearance<'a> {
    Appearance {
        sh_degree: set.sh_degree,
        sh: set.sh_of(i),
        opacity_logit: set.opacity_logit[i],
        identity: &set.identity[i],
    }
}

/// Everything the backward pass needs from one render.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    camera: Camera,
    set_len: usize,
    splats: Vec<Splat2D>,
    reposed: Vec<ReposedGaussian>,
    raster: RasterRecord,
}

impl ForwardRecord {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    pub fn raster(&self) -> &RasterRecord {
        &self.raster
    }

    /// Hash of every discrete decision the render made: which splats
    /// survived projection, and per pixel which splats contributed and
    /// whether their opacity was clamped.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let (w, hgt) = (self.camera.width as usize, self.camera.height as usize);
        for s in &self.splats {
            s.source.hash(&mut h);
        }
        let tiles_x = w.div_ceil(crate::rasterizer::TILE_SIZE);
        for y in 0..hgt {
            for x in 0..w {
                let tile = (y / crate::rasterizer::TILE_SIZE) * tiles_x + x / crate::rasterizer::TILE_SIZE;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                for &i in &self.raster.tile_lists()[tile] {
                    let s = &self.splats[i as usize];
                    let raw = s.falloff(px, py).1;
                    let a = raw.min(MAX_ALPHA);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    if t * (1.0 - a) < MIN_TRANSMITTANCE {
                        u32::MAX.hash(&mut h);
                        break;
                    }
                    (s.source, raw > MAX_ALPHA).hash(&mut h);
                    t *= 1.0 - a;
                }
                u32::MAX.hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Renders world-placed Gaussians. `include` restricts the render to a
/// subset; `None` draws all of them.
pub fn render_reposed(
    set: &GaussianSet,
    reposed: &[ReposedGaussian],
    include: Option<&[bool]>,
    cam: &Camera,
    cfg: &RasterConfig,
) -> (RenderOutput, ForwardRecord) {
    let projected: Vec<Option<Splat2D>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            if include.is_some_and(|m| !m[i]) {
                return None;
            }
            project(&reposed[i], &appearance(set, i), i as u32, cam)
        })
        .collect();
    let splats: Vec<Splat2D> = projected.into_iter().flatten().collect();
    let kept: Vec<ReposedGaussian> = splats.iter().map(|s| reposed[s.source as usize]).collect();
    let (out, raster) = rasterize(&splats, cam, cfg);
    (
        out,
        ForwardRecord {
            camera: cam.clone(),
            set_len: set.len(),
            splats,
            reposed: kept,
            raster,
        },
    )
}

/// Backward pass of [`render_reposed`] down to world placement.
pub fn backward_reposed(
    set: &GaussianSet,
    record: &ForwardRecord,
    cfg: &RasterConfig,
    upstream: &RenderGrad,
) -> Result<ReposedGradients> {
    if record.set_len != set.len() {
        return Err(Error::ShapeMismatch(format!(
            "forward pass saw {} gaussians, backward got {}",
            record.set_len,
            set.len()
        )));
    }
    let splat_grads = rasterize_backward(&record.splats, &record.raster, cfg, upstream)?;
    let stride = set.sh_stride();
    let per_splat: Vec<Result<(ReposedGrad, f64, Identity, Vec<f64>)>> = record
        .splats
        .par_iter()
        .zip(&record.reposed)
        .zip(&splat_grads)
        .map(|((s, g), sg)| {
            let mut d_sh = vec![0.0; stride];
            if sg.is_zero() {
                return Ok((ReposedGrad::default(), 0.0, [0.0; IDENTITY_DIM], d_sh));
            }
            let i = s.source as usize;
            let (rg, dl, di) = project_vjp(g, &appearance(set, i), &record.camera, sg, &mut d_sh)?;
            Ok((rg, dl, di, d_sh))
        })
        .collect();
    let mut out = ReposedGradients::zeros(set);
    for (s, r) in record.splats.iter().zip(per_splat) {
        let (rg, dl, di, d_sh) = r?;
        let i = s.source as usize;
        out.reposed[i] = rg;
        out.opacity_logit[i] = dl;
        out.identity[i] = di;
        out.sh[i * stride..(i + 1) * stride].copy_from_slice(&d_sh);
    }
    Ok(out)
}

/// Chains world-placement gradients back to the embedding parameters.
/// Frozen rows are left at zero.
pub fn chain_to_params(
    set: &GaussianSet,
    posed: &PosedMesh,
    rg: &ReposedGradients,
) -> Result<ParamGradients> {
    let stride = set.sh_stride();
    let rows: Vec<Result<([f64; 3], [f64; 4], [f64; 3])>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let g = &rg.reposed[i];
            if set.frozen[i] || *g == ReposedGrad::default() {
                return Ok(([0.0; 3], [0.0; 4], [0.0; 3]));
            }
            let t = posed.transport(set.face[i])?;
            Ok(repose_vjp(set, i, t, g))
        })
        .collect();
    let mut out = ParamGradients::zeros(set);
    for (i, r) in rows.into_iter().enumerate() {
        let (o, q, s) = r?;
        out.offsets[i] = o;
        out.rotation[i] = q;
        out.log_scale[i] = s;
        if !set.frozen[i] {
            out.opacity_logit[i] = rg.opacity_logit[i];
            out.identity[i] = rg.identity[i];
            out.sh[i * stride..(i + 1) * stride].copy_from_slice(&rg.sh[i * stride..(i + 1) * stride]);
        }
    }
    Ok(out)
}

/// Forward/backward pair over a posed scene. A backward pass consumes the
/// record left by the preceding forward pass.
#[derive(Debug, Default)]
pub struct DiffRenderer {
    pub config: RasterConfig,
    pending: Option<ForwardRecord>,
}

impl DiffRenderer {
    pub fn new(config: RasterConfig) -> Self {
        Self {
            config,
            pending: None,
        }
    }

    pub fn forward(
        &mut self,
        set: &GaussianSet,
        posed: &PosedMesh,
        cam: &Camera,
        include: Option<&[bool]>,
    ) -> Result<RenderOutput> {
        let reposed = repose_all(set, posed)?;
        let (out, record) = render_reposed(set, &reposed, include, cam, &self.config);
        self.pending = Some(record);
        Ok(out)
    }

    pub fn record(&self) -> Option<&ForwardRecord> {
        self.pending.as_ref()
    }

    pub fn backward(
        &mut self,
        set: &GaussianSet,
        posed: &PosedMesh,
        upstream: &RenderGrad,
    ) -> Result<ParamGradients> {
        let record = self.pending.take().ok_or(Error::MissingForwardRecord)?;
        let rg = backward_reposed(set, &record, &self.config, upstream)?;
        chain_to_params(set, posed, &rg)
    }
}

// ---------------------------------------------------------------- checking

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossId {
    Ori,
    Id2d,
    Id3d,
    Ani,
    Sdf,
    Ref,
}

impl LossId {
    pub const ALL: [LossId; 6] = [
        LossId::Ori,
        LossId::Id2d,
        LossId::Id3d,
        LossId::Ani,
        LossId::Sdf,
        LossId::Ref,
    ];

    /// Parameter groups the loss can depend on.
    pub fn groups(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            LossId::Ori | LossId::Ref => &[Offset, Rotation, LogScale, Opacity, Sh],
            LossId::Id2d => &[Offset, Rotation, LogScale, Opacity, Identity],
            LossId::Id3d => &[Identity],
            LossId::Ani => &[LogScale],
            LossId::Sdf => &[Offset],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossId::Ori => "ori",
            LossId::Id2d => "id2d",
            LossId::Id3d => "id3d",
            LossId::Ani => "ani",
            LossId::Sdf => "sdf",
            LossId::Ref => "ref",
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossId::ALL
            .into_iter()
            .find(|l| l.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss {s:?}")))
    }
}

/// One supervised view: camera, color target, category mask.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: RgbImage,
    pub mask: MaskImage,
}

/// One reference-video frame: pose, camera, color target.
#[derive(Clone, Debug)]
pub struct RefFrame {
    pub pose: Pose,
    pub camera: Camera,
    pub image: RgbImage,
}

/// A scene together with everything each loss needs to be evaluated.
#[derive(Clone, Debug)]
pub struct GradProblem {
    pub set: GaussianSet,
    pub mesh: SkinnedMesh,
    pub views: Vec<View>,
    pub frames: Vec<RefFrame>,
    pub weights: LossWeights,
    pub raster: RasterConfig,
    pub seed: u64,
}

fn image_of(r: &RenderOutput) -> RgbImage {
    RgbImage {
        width: r.width,
        height: r.height,
        data: r.color.clone(),
    }
}

impl GradProblem {
    /// Loss value, its gradient (when asked) and the discrete-decision
    /// signature of the evaluation.
    pub fn evaluate(
        &self,
        set: &GaussianSet,
        loss: LossId,
        want_grad: bool,
    ) -> Result<(f64, Option<ParamGradients>, u64)> {
        let canonical = PosedMesh::canonical(&self.mesh)?;
        let mut grads = ParamGradients::zeros(set);
        let mut sig = DefaultHasher::new();
        let n_views = self.views.len().max(1) as f64;
        let value = match loss {
            LossId::Ori | LossId::Id2d => {
                let mut total = 0.0;
                let mut r = DiffRenderer::new(self.raster.clone());
                for v in &self.views {
                    let out = r.forward(set, &canonical, &v.camera, None)?;
                    r.record().map(|rec| rec.signature()).hash(&mut sig);
                    let mut up = RenderGrad::zeros(out.width, out.height);
                    if loss == LossId::Ori {
                        let (l, g) = losses::loss_ori_grad(&out, &v.image, self.weights.lambda_ssim)?;
                        total += l;
                        up.color = g;
                        let signs: Vec<i8> = out
                            .color
                            .iter()
                            .zip(&v.image.data)
                            .map(|(a, b)| (a - b).partial_cmp(&0.0).map_or(0, |o| o as i8))
                            .collect();
                        signs.hash(&mut sig);
                    } else {
                        let (l, g) = losses::loss_id2d_grad(&out, &v.mask)?;
                        total += l;
                        up.identity = g;
                    }
                    if want_grad {
                        for x in up.color.iter_mut().chain(up.identity.iter_mut()) {
                            *x /= n_views;
                        }
                        let g = r.backward(set, &canonical, &up)?;
                        grads.add_scaled(&g, 1.0)?;
                    }
                }
                total / n_views
            }
            LossId::Ref => {
                let mut rendered = Vec::new();
                let mut records = Vec::new();
                for f in &self.frames {
                    let posed = PosedMesh::posed(&self.mesh, &f.pose)?;
                    let mut r = DiffRenderer::new(self.raster.clone());
                    let out = r.forward(set, &posed, &f.camera, None)?;
                    r.record().map(|rec| rec.signature()).hash(&mut sig);
                    rendered.push(image_of(&out));
                    records.push((r, posed));
                }
                let video: Vec<RgbImage> = self.frames.iter().map(|f| f.image.clone()).collect();
                let (l, gs) = losses::loss_ref_grad(&rendered, &video)?;
                if want_grad {
                    for (((mut r, posed), g), f) in records.into_iter().zip(gs).zip(&self.frames) {
                        let mut up = RenderGrad::zeros(f.camera.width as usize, f.camera.height as usize);
                        up.color = g;
                        let pg = r.backward(set, &posed, &up)?;
                        grads.add_scaled(&pg, 1.0)?;
                    }
                }
                l
            }
            LossId::Id3d => {
                let positions = set.canonical_positions(&self.mesh)?;
                let plan = losses::kl_plan(set, &positions, self.weights.knn_k, self.weights.knn_m, self.seed)?;
                plan.hash(&mut sig);
                let (l, g) = losses::loss_id3d_grad(set, &plan);
                grads.identity = g;
                l
            }
            LossId::Ani => {
                let (l, g) = losses::loss_ani_grad(set, self.weights.tau);
                for i in 0..set.len() {
                    let mut hi = 0;
                    let mut lo = 0;
                    for k in 1..3 {
                        if set.log_scale[i][k] > set.log_scale[i][hi] {
                            hi = k;
                        }
                        if set.log_scale[i][k] < set.log_scale[i][lo] {
                            lo = k;
                        }
                    }
                    (hi, lo, g[i] != [0.0; 3]).hash(&mut sig);
                }
                grads.log_scale = g;
                l
            }
            LossId::Sdf => {
                let sdf = MeshSdf::new(&self.mesh.vertices, &self.mesh.faces);
                let reposed = repose_all(set, &canonical)?;
                let positions: Vec<Vector3<f64>> = reposed.iter().map(|r| r.position).collect();
                let (l, g) = losses::loss_sdf_grad(set, &positions, &sdf, self.weights.sdf_margin);
                for p in &positions {
                    if let Some((d, _, hit)) = sdf.query_grad(p) {
                        (hit.face, hit.feature, d < self.weights.sdf_margin).hash(&mut sig);
                    }
                }
                grads.add_position_grads(set, &canonical, &g)?;
                l
            }
        };
        grads.zero_frozen(set);
        Ok((value, want_grad.then_some(grads), sig.finish()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Offset,
    Rotation,
    LogScale,
    Opacity,
    Sh,
    Identity,
}

/// One scalar parameter of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub gaussian: usize,
    pub param: ParamKind,
    pub component: usize,
}

impl ParamKind {
    pub fn width(self, sh_stride: usize) -> usize {
        match self {
            ParamKind::Offset | ParamKind::LogScale => 3,
            ParamKind::Rotation => 4,
            ParamKind::Opacity => 1,
            ParamKind::Sh => sh_stride,
            ParamKind::Identity => IDENTITY_DIM,
        }
    }
}

impl Coord {

    fn slot<'a>(&self, set: &'a mut GaussianSet) -> &'a mut f64 {
        let i = self.gaussian;
        let stride = set.sh_stride();
        match self.param {
            ParamKind::Offset => &mut set.offsets[i][self.component],
            ParamKind::Rotation => &mut set.rotation[i][self.component],
            ParamKind::LogScale => &mut set.log_scale[i][self.component],
            ParamKind::Opacity => &mut set.opacity_logit[i],
            ParamKind::Sh => &mut set.sh[i * stride + self.component],
            ParamKind::Identity => &mut set.identity[i][self.component],
        }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gaussian={} param={:?}[{}]", self.gaussian, self.param, self.component)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: LossId,
    pub max_rel_err: f64,
    pub worst_coord: Option<Coord>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a discrete decision.
    pub skipped: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loss={} checked={} skipped={} max_rel_err={:.3e}",
            self.loss, self.checked, self.skipped, self.max_rel_err
        )?;
        if let Some(c) = &self.worst_coord {
            write!(
                f,
                " worst=({c}) analytic={:.6e} numeric={:.6e}",
                self.worst_analytic, self.worst_numeric
            )?;
        }
        Ok(())
    }
}

pub const FD_STEP: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on `n_coords`
/// randomly drawn coordinates of non-frozen Gaussians, drawn from the
/// parameter groups the loss depends on. Coordinates whose perturbation
/// changes a discrete decision of the forward pass are skipped and counted.
pub fn check_gradients(problem: &GradProblem, loss: LossId, n_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let set = &problem.set;
    let (_, grads, base_sig) = problem.evaluate(set, loss, true)?;
    let grads = grads.expect("requested");
    let live: Vec<usize> = (0..set.len()).filter(|&i| !set.frozen[i]).collect();
    let mut report = GradCheckReport {
        loss,
        max_rel_err: 0.0,
        worst_coord: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    if live.is_empty() || n_coords == 0 {
        return Ok(report);
    }
    let stride = set.sh_stride();
    let slots: Vec<(ParamKind, usize)> = loss
        .groups()
        .iter()
        .flat_map(|&p| (0..p.width(stride)).map(move |c| (p, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    while report.checked < n_coords && attempts < 20 * n_coords {
        attempts += 1;
        let g = live[rng.random_range(0..live.len())];
        let (param, component) = slots[rng.random_range(0..slots.len())];
        let coord = Coord {
            gaussian: g,
            param,
            component,
        };
        let mut plus = set.clone();
        *coord.slot(&mut plus) += FD_STEP;
        let mut minus = set.clone();
        *coord.slot(&mut minus) -= FD_STEP;
        let (fp, _, sp) = problem.evaluate(&plus, loss, false)?;
        let (fm, _, sm) = problem.evaluate(&minus, loss, false)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = grads.get(&coord, stride);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst_coord.is_none() {
            report.max_rel_err = err;
            report.worst_coord = Some(coord);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
