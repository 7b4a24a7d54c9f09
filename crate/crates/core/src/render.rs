//! Raster output: per-image PNG encoding and labelled montages.

use std::io::Cursor;
use std::path::Path;

use image::{ExtendedColorType, GrayImage, ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Image, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::latent::LatentVector;
use crate::neighborhood::{ClassifiedNeighborhood, Layout, MorphPath, Neighbor, NeighborhoodSpec};

/// One color per class. Class 4 is purple and class 9 orange.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [44, 160, 44],
    [214, 39, 40],
    [140, 86, 75],
    [148, 52, 180],
    [23, 190, 207],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [255, 140, 0],
];

/// Width of the colored label border around each tile.
pub const BORDER: u32 = 2;
/// Gap between tiles; filled with [`SEPARATOR_COLOR`] where the labels differ.
pub const GAP: u32 = 4;
pub const SEPARATOR_COLOR: [u8; 3] = [0, 0, 0];
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

pub fn class_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

fn png_error(e: image::ImageError) -> Error {
    Error::Format(format!("png: {e}"))
}

/// Encodes an image as an 8-bit grayscale PNG.
pub fn encode_png(image: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(
            &image.to_u8(),
            IMAGE_SIDE as u32,
            IMAGE_SIDE as u32,
            ExtendedColorType::L8,
        )
        .expect("in-memory png encoding");
    out
}

/// Decodes an 8-bit grayscale 28x28 PNG back to raw intensities.
pub fn decode_png(bytes: &[u8]) -> Result<Vec<u8>> {
    let decoded = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map_err(png_error)?;
    let gray: GrayImage = decoded.to_luma8();
    if gray.dimensions() != (IMAGE_SIDE as u32, IMAGE_SIDE as u32) {
        return Err(Error::shape("28x28", format!("{:?}", gray.dimensions())));
    }
    Ok(gray.into_raw())
}

/// Tile edge length in pixels for a given upscaling factor.
pub fn tile_size(scale: u32) -> u32 {
    IMAGE_SIDE as u32 * scale + 2 * BORDER
}

/// Pixel origin of cell `(row, col)`.
pub fn tile_origin(row: usize, col: usize, scale: u32) -> (u32, u32) {
    let pitch = tile_size(scale) + GAP;
    (GAP + col as u32 * pitch, GAP + row as u32 * pitch)
}

/// Row-major montage: each cell is the decoded image upscaled by `scale`,
/// framed in its label color. Adjacent cells with different labels are split
/// by a dark separator filling the gap between them.
pub fn render_montage(neighborhood: &ClassifiedNeighborhood, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let (rows, cols) = neighborhood.layout.shape();
    let tile = tile_size(scale);
    let pitch = tile + GAP;
    let mut canvas = RgbImage::from_pixel(
        GAP + cols as u32 * pitch,
        GAP + rows as u32 * pitch,
        Rgb(BACKGROUND),
    );

    for &(a, b) in &neighborhood.boundary_edges {
        let (ra, ca) = (a / cols, a % cols);
        let (x, y) = tile_origin(ra, ca, scale);
        if b == a + 1 {
            fill(&mut canvas, x + tile, y, GAP, tile, SEPARATOR_COLOR);
        } else {
            fill(&mut canvas, x, y + tile, tile, GAP, SEPARATOR_COLOR);
        }
    }

    for (i, (image, &label)) in neighborhood.images.iter().zip(&neighborhood.labels).enumerate() {
        let (x0, y0) = tile_origin(i / cols, i % cols, scale);
        fill(&mut canvas, x0, y0, tile, tile, class_color(label));
        let raw = image.to_u8();
        for py in 0..IMAGE_SIDE as u32 * scale {
            for px in 0..IMAGE_SIDE as u32 * scale {
                let v = raw[(py / scale) as usize * IMAGE_SIDE + (px / scale) as usize];
                canvas.put_pixel(x0 + BORDER + px, y0 + BORDER + py, Rgb([v, v, v]));
            }
        }
    }
    canvas
}

fn fill(canvas: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: [u8; 3]) {
    for yy in y..y + h {
        for xx in x..x + w {
            canvas.put_pixel(xx, yy, Rgb(color));
        }
    }
}

pub fn encode_rgb_png(canvas: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(canvas.as_raw(), canvas.width(), canvas.height(), ExtendedColorType::Rgb8)
        .expect("in-memory png encoding");
    out
}

/// Writes `bytes` to `path` through a temporary file and rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Structured description of a neighborhood without its rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodRecord {
    pub spec: NeighborhoodSpec,
    pub layout: Layout,
    pub center_index: usize,
    pub latents: Vec<LatentVector>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub boundary_edges: Vec<(usize, usize)>,
}

impl NeighborhoodRecord {
    pub fn new(neighborhood: &ClassifiedNeighborhood, class_names: &[&str]) -> Self {
        NeighborhoodRecord {
            spec: neighborhood.spec.clone(),
            layout: neighborhood.layout,
            center_index: neighborhood.center_index,
            latents: neighborhood.latents.clone(),
            labels: neighborhood.labels.clone(),
            label_names: neighborhood
                .labels
                .iter()
                .map(|&l| class_names.get(l).copied().unwrap_or("?").to_string())
                .collect(),
            boundary_edges: neighborhood.boundary_edges.clone(),
        }
    }
}

/// Anchors and crossing of a morph path; the waypoints live in a [`NeighborhoodRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphRecord {
    pub anchor_true: Neighbor,
    pub anchor_pred: Neighbor,
    pub poi_position: usize,
    pub first_crossing: Option<(usize, usize)>,
}

impl MorphRecord {
    pub fn new(path: &MorphPath) -> Self {
        MorphRecord {
            anchor_true: path.anchor_true.clone(),
            anchor_pred: path.anchor_pred.clone(),
            poi_position: path.poi_position,
            first_crossing: path.first_crossing(),
        }
    }
}
