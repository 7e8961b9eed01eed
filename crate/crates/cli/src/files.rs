//! View directories, frame directories and contact sheets.

use std::fs;
use std::path::{Path, PathBuf};

use avatar_splat::deform::{AuxView, FrameSample};
use avatar_splat::gradients::View;
use avatar_splat::image::RgbImage;
use avatar_splat::io::{load_camera, load_image, load_mask, save_camera, save_image, save_mask};
use avatar_splat::scene::Camera;
use avatar_splat::skinning::Pose;
use avatar_splat::{Error, Result};

/// Stems of every `*.cam` file in `dir`, sorted.
fn camera_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".cam") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no .cam files", dir.display())));
    }
    Ok(stems)
}

fn require(dir: &Path, stem: &str, suffix: &str) -> Result<PathBuf> {
    let p = dir.join(format!("{stem}{suffix}"));
    if !p.is_file() {
        return Err(Error::InvalidArgument(format!("view {stem}: missing {stem}{suffix}")));
    }
    Ok(p)
}

fn camera_and_image(dir: &Path, stem: &str) -> Result<(Camera, RgbImage)> {
    let camera = load_camera(&dir.join(format!("{stem}.cam")))?;
    let image = load_image(&require(dir, stem, ".png")?)?;
    image.check_same_size(camera.width as usize, camera.height as usize)?;
    Ok((camera, image))
}

/// Camera, image and mask for every `NNN.cam` in `dir`.
pub fn load_views(dir: &Path) -> Result<Vec<View>> {
    camera_stems(dir)?
        .iter()
        .map(|stem| {
            let mask_path = require(dir, stem, ".mask.png")?;
            let (camera, image) = camera_and_image(dir, stem)?;
            let mask = load_mask(&mask_path)?;
            mask.check_same_size(camera.width as usize, camera.height as usize)?;
            Ok(View { camera, image, mask })
        })
        .collect()
}

/// Camera and image pairs, masks not needed.
pub fn load_targets(dir: &Path) -> Result<Vec<(Camera, RgbImage)>> {
    camera_stems(dir)?.iter().map(|s| camera_and_image(dir, s)).collect()
}

/// Reference frames `NNN` (one per pose, in stem order) and extra views
/// `NNN.K` attached to frame `NNN`.
pub fn load_frames(dir: &Path, poses: &[Pose], times: &[f64]) -> Result<(Vec<FrameSample>, Vec<AuxView>)> {
    let stems = camera_stems(dir)?;
    let (main, extra): (Vec<&String>, Vec<&String>) = stems.iter().partition(|s| !s.contains('.'));
    if main.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reference frames for {} poses",
            main.len(),
            poses.len()
        )));
    }
    let mut frames = Vec::with_capacity(main.len());
    for (k, stem) in main.iter().enumerate() {
        let (camera, image) = camera_and_image(dir, stem)?;
        frames.push(FrameSample {
            t: times[k],
            pose: poses[k].clone(),
            camera,
            image,
        });
    }
    let mut aux = Vec::new();
    for stem in extra {
        let base = stem.split('.').next().unwrap_or_default();
        let frame = main
            .iter()
            .position(|m| m.as_str() == base)
            .ok_or_else(|| Error::InvalidArgument(format!("view {stem}: no reference frame {base}")))?;
        let (camera, image) = camera_and_image(dir, stem)?;
        aux.push(AuxView { frame, camera, image });
    }
    Ok((frames, aux))
}

pub fn save_view(dir: &Path, stem: &str, camera: &Camera, image: &RgbImage, mask: Option<&avatar_splat::image::MaskImage>) -> Result<()> {
    save_camera(&dir.join(format!("{stem}.cam")), camera)?;
    save_image(&dir.join(format!("{stem}.png")), image)?;
    if let Some(m) = mask {
        save_mask(&dir.join(format!("{stem}.mask.png")), m)?;
    }
    Ok(())
}

/// Tiles images of equal size row by row.
pub fn contact_sheet(images: &[RgbImage]) -> RgbImage {
    let Some(first) = images.first() else {
        return RgbImage::new(0, 0);
    };
    let (w, h) = (first.width, first.height);
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut sheet = RgbImage::new(cols * w, rows * h);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h.min(img.height) {
            for x in 0..w.min(img.width) {
                sheet.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    sheet
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}
