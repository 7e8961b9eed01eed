use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use avatar_splat::deform::{animate, train_deform, DeformField};
use avatar_splat::editing::{extract_group, geometry_hash, recolor_group, remove_group, transfer_group, RecolorTarget};
use avatar_splat::gradients::{check_gradients, render_reposed, LossId};
use avatar_splat::image::{MaskImage, RgbImage};
use avatar_splat::io::{
    load_camera, load_mesh, load_poses, load_scene, save_image, save_image_rgba, save_mask, save_mesh, save_poses,
    save_scene, write_atomic, PoseFrameDoc, PoseSequenceDoc, RigidDoc, RunConfig,
};
use avatar_splat::lifecycle::{reconstruct, LogEntry};
use avatar_splat::procedural::{gradcheck_problem, layered_avatar, oscillating_band};
use avatar_splat::rasterizer::RenderOutput;
use avatar_splat::scene::{GaussianSet, Layer, SkinnedMesh};
use avatar_splat::skinning::{repose_all, PosedMesh};
use avatar_splat::{Error, Result};

use crate::files::{contact_sheet, ensure_dir, load_frames, load_targets, load_views, save_view};
use crate::{AnimateArgs, Cli, Command, EditCommand, Failure, FitArgs, GradcheckArgs, RenderArgs, SynthArgs};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn run(cli: &Cli, mut cfg: RunConfig) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Fit(a) => fit(a, cfg),
        Command::Render(a) => {
            print_config("render", &cfg);
            render(a, &cfg)
        }
        Command::Animate(a) => {
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.iters {
                cfg.deform.iters = n;
            }
            cfg.validate()?;
            print_config("animate", &cfg);
            animate_cmd(a, &cfg)
        }
        Command::Edit(e) => {
            if let EditCommand::Recolor { iters: Some(n), .. } = e {
                cfg.recolor.iters = *n;
            }
            print_config("edit", &cfg);
            edit(e, &cfg)
        }
        Command::Gradcheck(a) => {
            print_config("gradcheck", &cfg);
            gradcheck(a)
        }
        Command::Synth(a) => {
            print_config("synth", &cfg);
            synth(a)
        }
    }
}

/// One `config key=value` line per setting, section names joined by dots.
fn print_config(command: &str, cfg: &RunConfig) {
    println!("command={command}");
    let mut section = String::new();
    for line in cfg.to_toml().lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = format!("{name}.");
        } else if let Some((k, v)) = line.split_once(" = ") {
            println!("config {section}{k}={v}");
        }
    }
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("--{name} is required (or paths.{name} in the config)")))
}

fn fit(a: &FitArgs, mut cfg: RunConfig) -> std::result::Result<(), Failure> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        let s = &mut cfg.schedule;
        s.total_iters = n;
        s.densify_stop = s.densify_stop.min(n);
        s.densify_start = s.densify_start.min(s.densify_stop);
        s.front_view_iters = s.front_view_iters.min(n);
    }
    cfg.validate()?;
    let mesh_path = pick(&a.mesh, &cfg.paths.mesh, "mesh")?;
    let views_dir = pick(&a.views, &cfg.paths.views, "views")?;
    let out = pick(&a.out, &cfg.paths.out, "out")?;
    let init_path = a.init_splats.clone().or_else(|| cfg.paths.init_splats.clone());
    print_config("fit", &cfg);

    let mesh = load_mesh(&mesh_path)?;
    let views = load_views(&views_dir)?;
    let init = init_path.as_deref().map(|p| load_scene(p, &mesh)).transpose()?;
    ensure_dir(&out)?;
    println!("views={} mesh_faces={} init_splats={}", views.len(), mesh.face_count(), init.is_some());

    let log_path = out.join("metrics.log");
    let checkpoint = out.join("checkpoint.ply");
    let mut log = String::new();
    let every = a.checkpoint_every;
    let mut observer = |e: &LogEntry, set: &GaussianSet| -> Result<()> {
        writeln!(log, "{e}").expect("string write");
        if e.iteration % 100 == 0 {
            println!("{e}");
        }
        if every > 0 && (e.iteration + 1) % every == 0 {
            save_scene(&checkpoint, set, &mesh)?;
            write_atomic(&log_path, log.as_bytes())?;
        }
        Ok(())
    };
    let (set, report) = reconstruct(&mesh, &views, &cfg.reconstruct(), cfg.seed, init.as_ref(), &mut observer)?;

    let posed = PosedMesh::canonical(&mesh)?;
    let reposed = repose_all(&set, &posed)?;
    let mut renders = Vec::with_capacity(views.len());
    let mut psnr = 0.0;
    for v in &views {
        let img = to_image(&render_reposed(&set, &reposed, None, &v.camera, &cfg.raster).0);
        psnr += img.psnr(&v.image)?;
        renders.push(img);
    }
    psnr /= views.len() as f64;
    let scene_path = out.join("scene.ply");
    save_scene(&scene_path, &set, &mesh)?;
    save_image(&out.join("contact_sheet.png"), &contact_sheet(&renders))?;
    let summary = format!(
        "done gaussians={} body={} assets={} seeded={} pruned_inside={} pruned_transparent={} densified={} visible_body={} occluded_body={} train_psnr={:.3}",
        set.len(),
        set.count_in(Layer::Body),
        set.count_in(Layer::Asset),
        report.seeded,
        report.fit.pruned_inside,
        report.fit.pruned_transparent,
        report.fit.densified,
        report.inpaint.visible,
        report.inpaint.occluded,
        psnr
    );
    writeln!(log, "{summary}").expect("string write");
    write_atomic(&log_path, log.as_bytes())?;
    println!("{summary}");
    println!("wrote scene={}", scene_path.display());
    Ok(())
}

fn to_image(r: &RenderOutput) -> RgbImage {
    RgbImage {
        width: r.width,
        height: r.height,
        data: r.color.clone(),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn render(a: &RenderArgs, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let mesh = load_mesh(&a.mesh)?;
    let set = load_scene(&a.scene, &mesh)?;
    let camera = load_camera(&a.camera)?;
    let posed = match &a.pose {
        None => PosedMesh::canonical(&mesh)?,
        Some(p) => {
            let seq = load_poses(p, &mesh)?;
            let pose = seq.poses.get(a.frame).ok_or_else(|| {
                Error::InvalidArgument(format!("frame {} of a {}-frame sequence", a.frame, seq.poses.len()))
            })?;
            PosedMesh::posed(&mesh, pose)?
        }
    };
    let reposed = repose_all(&set, &posed)?;
    let out = render_reposed(&set, &reposed, None, &camera, &cfg.raster).0;
    save_image_rgba(&a.out, &to_image(&out), &out.alpha)?;
    println!("wrote image={}", a.out.display());
    if a.layers {
        let table = cfg.category_table()?;
        let present: BTreeSet<usize> = (0..set.len()).map(|i| set.category(i)).collect();
        for &c in &present {
            let include: Vec<bool> = (0..set.len()).map(|i| set.category(i) == c).collect();
            let layer = render_reposed(&set, &reposed, Some(&include), &camera, &cfg.raster).0;
            let name = table.name(c).unwrap_or("unknown").to_ascii_lowercase().replace([' ', '/'], "-");
            let path = sibling(&a.out, &format!(".cat{c:02}-{name}.png"));
            save_image_rgba(&path, &to_image(&layer), &layer.alpha)?;
            println!("wrote layer={} category={c} path={}", name, path.display());
        }
        let labels = MaskImage::from_labels(out.width, out.height, out.labels())?;
        let path = sibling(&a.out, ".labels.png");
        save_mask(&path, &labels)?;
        println!("wrote labels={} categories={}", path.display(), present.len());
    }
    Ok(())
}

fn animate_cmd(a: &AnimateArgs, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let mesh = load_mesh(&a.mesh)?;
    let set = load_scene(&a.scene, &mesh)?;
    let seq = load_poses(&a.poses, &mesh)?;
    let cams = a.cameras.iter().map(|p| load_camera(p)).collect::<Result<Vec<_>>>()?;
    ensure_dir(&a.out)?;
    let field = if a.train_deform {
        let dir = a.frames.as_ref().expect("clap enforces --frames");
        let (frames, aux) = load_frames(dir, &seq.poses, &seq.times)?;
        let (field, report) = train_deform(&set, &mesh, &frames, &aux, &cfg.deform, cfg.seed)?;
        for (it, r, x) in report.log.iter().filter(|(it, _, _)| it % 100 == 0) {
            println!("deform iter={it} ref={r:.6} aux={x:.6}");
        }
        println!(
            "deform initial_ref={:.6} final_ref={:.6} aux_views={}",
            report.initial_ref,
            report.final_ref,
            aux.len()
        );
        let path = a.out.join("deform.bin");
        write_atomic(&path, &field.to_bytes())?;
        println!("wrote deform={}", path.display());
        Some(field)
    } else if let Some(p) = &a.deform {
        let bytes = std::fs::read(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        Some(DeformField::from_bytes(&bytes)?)
    } else {
        None
    };
    let renders = animate(&set, &mesh, &seq.poses, &seq.times, field.as_ref(), &cams, &cfg.raster)?;
    for (k, per_cam) in renders.iter().enumerate() {
        for (c, r) in per_cam.iter().enumerate() {
            let path = a.out.join(format!("frame_{k:04}_cam{c}.png"));
            save_image_rgba(&path, &to_image(r), &r.alpha)?;
        }
    }
    println!("wrote frames={} cameras={} dir={}", renders.len(), cams.len(), a.out.display());
    Ok(())
}

fn parse_category(s: &str, cfg: &RunConfig) -> Result<usize> {
    if let Ok(i) = s.parse::<usize>() {
        return Ok(i);
    }
    cfg.category_table()?
        .index_of(s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
}

fn parse_color(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("color {s:?} is not r,g,b")))?;
    match parts.as_slice() {
        &[r, g, b] if parts.iter().all(|v| (0.0..=1.0).contains(v)) => Ok([r, g, b]),
        _ => Err(Error::InvalidArgument(format!("color {s:?} needs three values in [0, 1]"))),
    }
}

fn load_pair(scene: &Path, mesh: &Path) -> Result<(SkinnedMesh, GaussianSet)> {
    let mesh = load_mesh(mesh)?;
    let set = load_scene(scene, &mesh)?;
    Ok((mesh, set))
}

fn edit(e: &EditCommand, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    match e {
        EditCommand::Remove { io, category } => {
            let (mesh, set) = load_pair(&io.scene, &io.mesh)?;
            let c = parse_category(category, cfg)?;
            let out = remove_group(&set, c)?;
            save_scene(&io.out, &out, &mesh)?;
            println!("removed={} remaining={} category={c}", set.len() - out.len(), out.len());
        }
        EditCommand::Recolor {
            io,
            category,
            color,
            target_views,
            ..
        } => {
            let (mesh, set) = load_pair(&io.scene, &io.mesh)?;
            let c = parse_category(category, cfg)?;
            let target = match (color, target_views) {
                (Some(s), _) => RecolorTarget::Flat(parse_color(s)?),
                (None, Some(dir)) => RecolorTarget::Views(load_targets(dir)?),
                (None, None) => return Err(Error::InvalidArgument("--color or --target-views is required".into()).into()),
            };
            let before = geometry_hash(&set);
            let out = recolor_group(&set, &mesh, c, &target, &cfg.recolor)?;
            let after = geometry_hash(&out);
            if before != after {
                return Err(Failure::Invariant("recolor changed geometry".into()));
            }
            save_scene(&io.out, &out, &mesh)?;
            println!("recolored category={c} geometry_hash={after}");
        }
        EditCommand::Extract { io, category, rest } => {
            let (mesh, set) = load_pair(&io.scene, &io.mesh)?;
            let c = parse_category(category, cfg)?;
            let (group, remainder) = extract_group(&set, &mesh, c)?;
            save_scene(&io.out, &group.set, &mesh)?;
            if let Some(r) = rest {
                save_scene(r, &remainder, &mesh)?;
            }
            println!("extracted={} category={c} remaining={}", group.set.len(), remainder.len());
        }
        EditCommand::Transfer { io, target_mesh } => {
            let (mesh, set) = load_pair(&io.scene, &io.mesh)?;
            let target = load_mesh(target_mesh)?;
            let out = transfer_group(&set, &mesh, &target)?;
            save_scene(&io.out, &out, &target)?;
            println!("transferred={} mesh_hash={}", out.count_in(Layer::Asset), target.content_hash());
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let loss: LossId = a.loss.parse()?;
    let problem = gradcheck_problem(a.seed);
    let report = check_gradients(&problem, loss, a.coords, a.seed)?;
    println!("gradcheck {report}");
    if report.checked == 0 || !(report.max_rel_err <= GRADCHECK_TOLERANCE) {
        return Err(Failure::Invariant(format!(
            "gradient check failed: max_rel_err={:.3e} checked={}",
            report.max_rel_err, report.checked
        )));
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> std::result::Result<(), Failure> {
    ensure_dir(&a.out)?;
    match a.kind.as_str() {
        "avatar" => {
            let fx = layered_avatar(a.views, a.size, a.sh_degree)?;
            save_mesh(&a.out.join("mesh.json"), &fx.mesh)?;
            save_scene(&a.out.join("truth.ply"), &fx.truth, &fx.mesh)?;
            let views = a.out.join("views");
            ensure_dir(&views)?;
            for (k, v) in fx.views.iter().enumerate() {
                save_view(&views, &format!("{k:03}"), &v.camera, &v.image, Some(&v.mask))?;
            }
            let held = a.out.join("heldout");
            ensure_dir(&held)?;
            save_view(&held, "000", &fx.held_out.camera, &fx.held_out.image, Some(&fx.held_out.mask))?;
            let bend = |angle: f64| RigidDoc {
                rotation: [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()],
                translation: [0.0; 3],
            };
            let frames = (0..5)
                .map(|k| PoseFrameDoc {
                    time: None,
                    root: None,
                    joints: [("upper".to_string(), bend(0.4 * (PI * k as f64 / 4.0).sin()))].into(),
                })
                .collect();
            save_poses(&a.out.join("poses.json"), &PoseSequenceDoc { version: 1, frames })?;
            println!("wrote fixture=avatar views={} size={} gaussians={}", fx.views.len(), a.size, fx.truth.len());
        }
        "band" => {
            let fx = oscillating_band(a.views, a.size, 0.06)?;
            save_mesh(&a.out.join("mesh.json"), &fx.mesh)?;
            save_scene(&a.out.join("scene.ply"), &fx.set, &fx.mesh)?;
            let dir = a.out.join("frames");
            ensure_dir(&dir)?;
            for (k, f) in fx.frames.iter().enumerate() {
                save_view(&dir, &format!("{k:03}"), &f.camera, &f.image, None)?;
            }
            for (n, x) in fx.aux.iter().enumerate() {
                save_view(&dir, &format!("{:03}.{}", x.frame, n % 3), &x.camera, &x.image, None)?;
            }
            let frames = fx
                .frames
                .iter()
                .map(|f| PoseFrameDoc {
                    time: Some(f.t),
                    root: None,
                    joints: Default::default(),
                })
                .collect();
            save_poses(&a.out.join("poses.json"), &PoseSequenceDoc { version: 1, frames })?;
            let disp: Vec<[f64; 3]> = fx.displacement.iter().map(|d| [d.x, d.y, d.z]).collect();
            let text = vec3_json(&disp);
            write_atomic(&a.out.join("displacement.json"), text.as_bytes())?;
            println!("wrote fixture=band frames={} size={} band={}", fx.frames.len(), a.size, fx.band.len());
        }
        other => return Err(Error::InvalidArgument(format!("unknown fixture kind {other:?}")).into()),
    }
    Ok(())
}

/// JSON array of 3-vectors.
fn vec3_json(v: &[[f64; 3]]) -> String {
    let rows: Vec<String> = v.iter().map(|r| format!("[{:?}, {:?}, {:?}]", r[0], r[1], r[2])).collect();
    format!("[{}]\n", rows.join(", "))
}
