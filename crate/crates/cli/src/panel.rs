//! Grad-CAM panels: per image, the original, its map overlay, the augmented
//! image, its map overlay, and the original map replayed into the augmented
//! frame.

use std::path::Path;

use camcon::checkpoint::Checkpoint;
use camcon::gradcam::normalize_cam_batch;
use camcon::autograd::no_grad;
use camcon::trainer::{pseudo_targets, to_batch};
use camcon::{
    apply_to_image, compute_cam, replay_spatial, upsample_cam, AugmentationRecord, Backbone, CamBatch, CamMap, Classifier,
    LayerId, ReplayedCam,
};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::CliError;

pub const TILES_PER_ROW: usize = 5;
const TILE_PX: u32 = 96;
const GAP_PX: u32 = 2;

#[derive(Clone, Debug)]
pub struct PanelRow {
    pub original: Array3<f64>,
    pub augmented: Array3<f64>,
    pub cam_original: CamMap,
    pub cam_augmented: CamMap,
    pub cam_replayed: ReplayedCam,
}

fn augmented_maps<M: Classifier + ?Sized>(
    model: &M,
    images: Vec<Array3<f64>>,
    classes: &[usize],
    layer: LayerId,
) -> Result<Vec<CamMap>, CliError> {
    let raw = compute_cam(model, &to_batch(images), classes, layer, false)?;
    let maps = no_grad(|| normalize_cam_batch(&raw.maps))?;
    Ok(CamBatch { maps, ..raw }.to_maps())
}

/// Maps for each `[C, H, W]` image in [0, 1]. Both maps of a row explain the
/// class predicted for the original image.
pub fn panel_rows<M: Classifier + ?Sized>(
    model: &M,
    images: &[Array3<f64>],
    layer: LayerId,
    record: &AugmentationRecord,
) -> Result<Vec<PanelRow>, CliError> {
    if images.is_empty() {
        return Err(CliError::Config("panel needs at least one image".into()));
    }
    let augmented: Vec<_> = images
        .iter()
        .map(|im| apply_to_image(im, record))
        .collect::<Result<_, _>>()?;
    let targets = pseudo_targets(model, &to_batch(images.to_vec()), layer, true)?;
    let originals = targets.cams.expect("maps requested");
    let augs = augmented_maps(model, augmented.clone(), &targets.classes, layer)?;
    images
        .iter()
        .zip(augmented)
        .zip(originals.into_iter().zip(augs))
        .map(|((im, aug), (co, ca))| {
            Ok(PanelRow {
                cam_replayed: replay_spatial(&co, record)?,
                original: im.clone(),
                augmented: aug,
                cam_original: co,
                cam_augmented: ca,
            })
        })
        .collect()
}

/// Piecewise-linear jet colormap on [0, 1].
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn cam_rgb(map: &Array2<f64>, valid: Option<&Array2<bool>>) -> Array3<f64> {
    let (h, w) = map.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| match valid {
        Some(m) if !m[[y, x]] => 0.0,
        _ => jet(map[[y, x]])[c],
    })
}

fn overlay(img: &Array3<f64>, map: &Array2<f64>) -> Array3<f64> {
    let heat = cam_rgb(map, None);
    img * 0.5 + heat * 0.5
}

fn valid_at(mask: &Array2<bool>, size: (usize, usize)) -> Array2<bool> {
    let (mh, mw) = mask.dim();
    Array2::from_shape_fn(size, |(y, x)| mask[[y * mh / size.0, x * mw / size.1]])
}

/// Lays rows out as a grid of `TILES_PER_ROW` tiles each.
pub fn render_panel(rows: &[PanelRow]) -> Result<RgbImage, CliError> {
    let stride = TILE_PX + GAP_PX;
    let mut out = RgbImage::from_pixel(
        TILES_PER_ROW as u32 * stride - GAP_PX,
        rows.len() as u32 * stride - GAP_PX,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        let (_, h, w) = row.original.dim();
        let up = |m: &CamMap| upsample_cam(m, (h, w)).map(|m| m.grid);
        let replay_valid = valid_at(&row.cam_replayed.valid, (h, w));
        let tiles = [
            row.original.clone(),
            overlay(&row.original, &up(&row.cam_original)?),
            row.augmented.clone(),
            overlay(&row.augmented, &up(&row.cam_augmented)?),
            cam_rgb(&up(&row.cam_replayed.map)?, Some(&replay_valid)),
        ];
        for (t, tile) in tiles.iter().enumerate() {
            let (ox, oy) = (t as u32 * stride, r as u32 * stride);
            for py in 0..TILE_PX {
                for px in 0..TILE_PX {
                    let (y, x) = (py as usize * h / TILE_PX as usize, px as usize * w / TILE_PX as usize);
                    let rgb = [0, 1, 2].map(|c| (tile[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                    out.put_pixel(ox + px, oy + py, Rgb(rgb));
                }
            }
        }
    }
    Ok(out)
}

/// Writes the panel for `images` under the model in `checkpoint` to `out`.
pub fn export_cam_panel(
    checkpoint: &Path,
    images: &[Array3<f64>],
    layer: LayerId,
    record: &AugmentationRecord,
    out: &Path,
) -> Result<Vec<PanelRow>, CliError> {
    let model: Backbone = Checkpoint::load(checkpoint)?.build_model()?;
    let rows = panel_rows(&model, images, layer, record)?;
    render_panel(&rows)?
        .save(out)
        .map_err(|e| CliError::Run(format!("{}: {e}", out.display())))?;
    Ok(rows)
}
