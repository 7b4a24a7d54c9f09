//! Latent neighborhoods around a point-of-interest.
//!
//! A neighborhood is a set of latent vectors laid out as a path or a grid,
//! decoded to images and labelled by the classifier under investigation.
//! Adjacent cells with different labels mark the local decision boundary.

use serde::{Deserialize, Serialize};

use crate::classifier::ImageClassifier;
use crate::data::{Dataset, DatasetName, Image, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::latent::LatentVector;
use crate::vae::Vae;

pub const DEFAULT_STEP_LENGTH: f64 = 1.0;
pub const DEFAULT_COUNT_PER_SIDE: usize = 4;
pub const DEFAULT_GRID_SIZE: usize = 9;
pub const DEFAULT_NUM_NEIGHBORS: usize = 8;

fn default_step_length() -> f64 {
    DEFAULT_STEP_LENGTH
}

fn default_count_per_side() -> usize {
    DEFAULT_COUNT_PER_SIDE
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

fn default_num_neighbors() -> usize {
    DEFAULT_NUM_NEIGHBORS
}

/// What to generate around the point-of-interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeighborhoodSpec {
    /// Walk along one latent axis, `count_per_side` steps each way.
    #[serde(rename = "path_1d")]
    Path1d {
        dim: usize,
        #[serde(default = "default_step_length")]
        step_length: f64,
        #[serde(default = "default_count_per_side")]
        count_per_side: usize,
    },
    /// A `rows x cols` matrix over two latent axes; `dims[0]` varies by row.
    #[serde(rename = "grid_2d")]
    Grid2d {
        dims: [usize; 2],
        #[serde(default = "default_step_length")]
        step_length: f64,
        #[serde(default = "default_grid_size")]
        rows: usize,
        #[serde(default = "default_grid_size")]
        cols: usize,
    },
    /// Nearest true-class instance, through the point-of-interest, to the nearest predicted-class instance.
    Morph {
        #[serde(default = "default_num_neighbors")]
        num_neighbors: usize,
    },
}

impl NeighborhoodSpec {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        let check_dim = |d: usize| {
            if d >= latent_dim {
                Err(Error::Argument(format!("dimension {d} outside [0, {latent_dim})")))
            } else {
                Ok(())
            }
        };
        let check_step = |s: f64| {
            if s > 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("step length must be positive, got {s}")))
            }
        };
        match *self {
            NeighborhoodSpec::Path1d {
                dim,
                step_length,
                count_per_side,
            } => {
                check_dim(dim)?;
                check_step(step_length)?;
                if count_per_side == 0 {
                    return Err(Error::Argument("count_per_side must be at least 1".into()));
                }
            }
            NeighborhoodSpec::Grid2d {
                dims,
                step_length,
                rows,
                cols,
            } => {
                check_dim(dims[0])?;
                check_dim(dims[1])?;
                if dims[0] == dims[1] {
                    return Err(Error::Argument("grid dimensions must differ".into()));
                }
                check_step(step_length)?;
                if rows % 2 == 0 || cols % 2 == 0 {
                    return Err(Error::Argument(format!(
                        "grid size must be odd so a center cell exists, got {rows}x{cols}"
                    )));
                }
            }
            NeighborhoodSpec::Morph { num_neighbors } => {
                if num_neighbors == 0 {
                    return Err(Error::Argument("num_neighbors must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        match *self {
            NeighborhoodSpec::Path1d { count_per_side, .. } => Layout::Path {
                len: 2 * count_per_side + 1,
            },
            NeighborhoodSpec::Grid2d { rows, cols, .. } => Layout::Grid { rows, cols },
            NeighborhoodSpec::Morph { num_neighbors } => Layout::Path {
                len: 2 * num_neighbors + 1,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layout {
    Path { len: usize },
    Grid { rows: usize, cols: usize },
}

impl Layout {
    pub fn len(&self) -> usize {
        match *self {
            Layout::Path { len } => len,
            Layout::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of the rendered arrangement; a path is one row.
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            Layout::Path { len } => (1, len),
            Layout::Grid { rows, cols } => (rows, cols),
        }
    }

    pub fn center(&self) -> usize {
        let (rows, cols) = self.shape();
        (rows / 2) * cols + cols / 2
    }

    /// Path neighbours `(i, i + 1)`, or 4-connected grid neighbours in row-major order.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let (rows, cols) = self.shape();
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    out.push((i, i + 1));
                }
                if r + 1 < rows {
                    out.push((i, i + cols));
                }
            }
        }
        out
    }
}

fn check_axis(z: &LatentVector, dim: usize) -> Result<()> {
    if dim >= z.dim() {
        return Err(Error::Argument(format!("dimension {dim} outside [0, {})", z.dim())));
    }
    Ok(())
}

fn check_step(step_length: f64) -> Result<()> {
    if !(step_length > 0.0 && step_length.is_finite()) {
        return Err(Error::Argument(format!("step length must be positive, got {step_length}")));
    }
    Ok(())
}

/// `z + k * step_length * e_dim` for `k = -count ..= count`.
pub fn perturb_1d(z: &LatentVector, dim: usize, step_length: f64, count_per_side: usize) -> Result<Vec<LatentVector>> {
    check_axis(z, dim)?;
    check_step(step_length)?;
    let count = count_per_side as i64;
    Ok((-count..=count)
        .map(|k| {
            if k == 0 {
                z.clone()
            } else {
                z.offset(dim, k as f64 * step_length)
            }
        })
        .collect())
}

/// Row-major grid; cell `(r, c)` is offset by `(r - rows/2)` steps along
/// `dim_a` and `(c - cols/2)` steps along `dim_b`.
pub fn perturb_grid(
    z: &LatentVector,
    dim_a: usize,
    dim_b: usize,
    step_length: f64,
    rows: usize,
    cols: usize,
) -> Result<Vec<LatentVector>> {
    check_axis(z, dim_a)?;
    check_axis(z, dim_b)?;
    check_step(step_length)?;
    if dim_a == dim_b {
        return Err(Error::Argument("grid dimensions must differ".into()));
    }
    if rows % 2 == 0 || cols % 2 == 0 {
        return Err(Error::Argument(format!("grid size must be odd, got {rows}x{cols}")));
    }
    let (half_r, half_c) = ((rows / 2) as i64, (cols / 2) as i64);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let (dr, dc) = (r - half_r, c - half_c);
            if dr == 0 && dc == 0 {
                out.push(z.clone());
                continue;
            }
            let mut values = z.values().to_vec();
            values[dim_a] += dr as f64 * step_length;
            values[dim_b] += dc as f64 * step_length;
            out.push(LatentVector::new(values)?);
        }
    }
    Ok(out)
}

/// Adjacent index pairs whose labels differ.
pub fn boundary_edges(labels: &[usize], layout: Layout) -> Vec<(usize, usize)> {
    layout
        .adjacent_pairs()
        .into_iter()
        .filter(|&(a, b)| labels[a] != labels[b])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifiedNeighborhood {
    pub spec: NeighborhoodSpec,
    pub layout: Layout,
    pub center_index: usize,
    pub latents: Vec<LatentVector>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub boundary_edges: Vec<(usize, usize)>,
}

/// Decodes every latent and labels it with `classifier`.
pub fn classify_neighborhood(
    latents: Vec<LatentVector>,
    spec: &NeighborhoodSpec,
    vae: &Vae,
    classifier: &dyn ImageClassifier,
) -> Result<ClassifiedNeighborhood> {
    if latents.is_empty() {
        return Err(Error::Argument("no latents to classify".into()));
    }
    let layout = spec.layout();
    if layout.len() != latents.len() {
        return Err(Error::shape(
            format!("{} latents for {layout:?}", layout.len()),
            latents.len(),
        ));
    }
    let images = vae.decode_batch(&latents)?;
    let labels: Vec<usize> = classifier.predict_batch(&images).into_iter().map(|p| p.label).collect();
    let boundary_edges = boundary_edges(&labels, layout);
    Ok(ClassifiedNeighborhood {
        spec: spec.clone(),
        layout,
        center_index: layout.center(),
        latents,
        images,
        labels,
        boundary_edges,
    })
}

/// An image being explained, with its embedding and the labels involved.
#[derive(Clone, Debug, PartialEq)]
pub struct PointOfInterest {
    /// Where the image came from, if it is a dataset item.
    pub source: Option<(Split, usize)>,
    pub image: Image,
    pub latent: LatentVector,
    pub true_label: usize,
    pub predicted_label: usize,
    /// Label of `decode(latent)`; may differ from `predicted_label`.
    pub reconstruction_label: usize,
}

impl PointOfInterest {
    pub fn new(
        image: Image,
        true_label: usize,
        source: Option<(Split, usize)>,
        vae: &Vae,
        classifier: &dyn ImageClassifier,
    ) -> Result<Self> {
        if true_label >= NUM_CLASSES {
            return Err(Error::Argument(format!("label {true_label} out of range")));
        }
        let latent = vae.encode(&image).mean;
        let predicted_label = classifier.predict(&image).label;
        let reconstruction_label = classifier.predict(&vae.decode(&latent)?).label;
        Ok(PointOfInterest {
            source,
            image,
            latent,
            true_label,
            predicted_label,
            reconstruction_label,
        })
    }

    pub fn from_dataset(
        dataset: &Dataset,
        index: usize,
        vae: &Vae,
        classifier: &dyn ImageClassifier,
    ) -> Result<Self> {
        let image = dataset.image(index).ok_or_else(|| {
            Error::Argument(format!("index {index} outside dataset of {} items", dataset.len()))
        })?;
        PointOfInterest::new(
            image.clone(),
            dataset.label(index).unwrap(),
            Some((dataset.split(), index)),
            vae,
            classifier,
        )
    }

    pub fn is_mispredicted(&self) -> bool {
        self.true_label != self.predicted_label
    }
}

/// Paths, grids and morphs for one point-of-interest. Morphs need `index`.
pub fn explore(
    poi: &PointOfInterest,
    spec: &NeighborhoodSpec,
    index: Option<&LatentIndex>,
    vae: &Vae,
    classifier: &dyn ImageClassifier,
) -> Result<Exploration> {
    spec.validate(vae.latent_dim())?;
    match *spec {
        NeighborhoodSpec::Path1d {
            dim,
            step_length,
            count_per_side,
        } => {
            let latents = perturb_1d(&poi.latent, dim, step_length, count_per_side)?;
            Ok(Exploration::Neighborhood(classify_neighborhood(latents, spec, vae, classifier)?))
        }
        NeighborhoodSpec::Grid2d {
            dims,
            step_length,
            rows,
            cols,
        } => {
            let latents = perturb_grid(&poi.latent, dims[0], dims[1], step_length, rows, cols)?;
            Ok(Exploration::Neighborhood(classify_neighborhood(latents, spec, vae, classifier)?))
        }
        NeighborhoodSpec::Morph { num_neighbors } => {
            let index = index.ok_or_else(|| Error::Argument("morph paths need a latent index".into()))?;
            Ok(Exploration::Morph(morph_path(poi, index, num_neighbors, vae, classifier)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Exploration {
    Neighborhood(ClassifiedNeighborhood),
    Morph(MorphPath),
}

impl Exploration {
    pub fn neighborhood(&self) -> &ClassifiedNeighborhood {
        match self {
            Exploration::Neighborhood(n) => n,
            Exploration::Morph(m) => &m.waypoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub dataset_index: usize,
    pub label: usize,
    pub latent: LatentVector,
    pub distance: f64,
}

/// Encoded means of a dataset, grouped by class for nearest-neighbour queries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentIndex {
    dim: usize,
    dataset: DatasetName,
    split: Split,
    latents: Vec<f64>,
    by_class: Vec<Vec<usize>>,
}

impl LatentIndex {
    pub fn build(dataset: &Dataset, vae: &Vae) -> Self {
        let latents = vae.encode_batch(dataset.images()).into_iter().map(|e| e.mean).collect();
        Self::from_latents(dataset.name(), dataset.split(), dataset.labels(), latents)
            .expect("encoder output is consistent")
    }

    pub fn from_latents(dataset: DatasetName, split: Split, labels: &[u8], latents: Vec<LatentVector>) -> Result<Self> {
        if labels.len() != latents.len() {
            return Err(Error::Consistency(format!(
                "{} labels for {} latents",
                labels.len(),
                latents.len()
            )));
        }
        let dim = latents.first().map_or(0, LatentVector::dim);
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        let mut flat = Vec::with_capacity(latents.len() * dim);
        for (i, (z, &label)) in latents.iter().zip(labels).enumerate() {
            z.check_dim(dim)?;
            flat.extend_from_slice(z.values());
            by_class
                .get_mut(label as usize)
                .ok_or_else(|| Error::Consistency(format!("label {label} out of range")))?
                .push(i);
        }
        Ok(LatentIndex {
            dim,
            dataset,
            split,
            latents: flat,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn dataset(&self) -> DatasetName {
        self.dataset
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn latent(&self, index: usize) -> LatentVector {
        LatentVector::new(self.latents[index * self.dim..(index + 1) * self.dim].to_vec()).unwrap()
    }

    /// Class member with the smallest L1 distance to `z`, lowest index on ties.
    pub fn nearest_in_class(&self, z: &LatentVector, class: usize) -> Result<Neighbor> {
        self.nearest_excluding(z, class, None)
    }

    /// As [`LatentIndex::nearest_in_class`], skipping dataset item `exclude`.
    pub fn nearest_excluding(&self, z: &LatentVector, class: usize, exclude: Option<usize>) -> Result<Neighbor> {
        z.check_dim(self.dim)?;
        let members = self
            .by_class
            .get(class)
            .ok_or_else(|| Error::Argument(format!("class {class} out of range")))?;
        let query = z.values();
        let mut best: Option<(usize, f64)> = None;
        for &i in members {
            if Some(i) == exclude {
                continue;
            }
            let row = &self.latents[i * self.dim..(i + 1) * self.dim];
            let bound = best.map_or(f64::INFINITY, |(_, d)| d);
            // Partial sums of non-negative terms only grow, so a row can be
            // abandoned as soon as it exceeds the best full distance.
            let mut dist = 0.0;
            for (a, b) in row.iter().zip(query) {
                dist += (a - b).abs();
                if dist > bound {
                    break;
                }
            }
            if dist < bound {
                best = Some((i, dist));
            }
        }
        let (dataset_index, distance) = best.ok_or_else(|| {
            Error::NotFound(format!("no instance of class {class} in the {} {} split", self.dataset, self.split))
        })?;
        Ok(Neighbor {
            dataset_index,
            label: class,
            latent: self.latent(dataset_index),
            distance,
        })
    }
}

/// Encodes the class-`target_class` members of `dataset` and returns the one nearest to `z_poi`.
pub fn nearest_in_class(z_poi: &LatentVector, dataset: &Dataset, target_class: usize, vae: &Vae) -> Result<Neighbor> {
    let members: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.label(i) == Some(target_class))
        .collect();
    let subset = dataset.select(&members);
    let index = LatentIndex::build(&subset, vae);
    let found = index.nearest_in_class(z_poi, target_class)?;
    Ok(Neighbor {
        dataset_index: members[found.dataset_index],
        ..found
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphPath {
    pub anchor_true: Neighbor,
    pub anchor_pred: Neighbor,
    /// Position of the point-of-interest on the path.
    pub poi_position: usize,
    pub waypoints: ClassifiedNeighborhood,
}

impl MorphPath {
    /// First adjacent pair along the path whose labels differ.
    pub fn first_crossing(&self) -> Option<(usize, usize)> {
        self.waypoints.boundary_edges.first().copied()
    }
}

/// Piecewise-linear latent path `anchor_true -> poi -> anchor_pred`, with
/// `num_neighbors` steps per half, every waypoint decoded and classified.
pub fn morph_path(
    poi: &PointOfInterest,
    index: &LatentIndex,
    num_neighbors: usize,
    vae: &Vae,
    classifier: &dyn ImageClassifier,
) -> Result<MorphPath> {
    if num_neighbors == 0 {
        return Err(Error::Argument("num_neighbors must be at least 1".into()));
    }
    let exclude = poi
        .source
        .filter(|(split, _)| *split == index.split())
        .map(|(_, i)| i);
    let anchor_true = index.nearest_excluding(&poi.latent, poi.true_label, exclude)?;
    let anchor_pred = index.nearest_excluding(&poi.latent, poi.predicted_label, exclude)?;

    let n = num_neighbors as f64;
    let mut latents = Vec::with_capacity(2 * num_neighbors + 1);
    for k in 0..num_neighbors {
        latents.push(LatentVector::lerp(&anchor_true.latent, &poi.latent, k as f64 / n));
    }
    latents.push(poi.latent.clone());
    for k in 1..=num_neighbors {
        latents.push(LatentVector::lerp(&poi.latent, &anchor_pred.latent, k as f64 / n));
    }
    let spec = NeighborhoodSpec::Morph { num_neighbors };
    let waypoints = classify_neighborhood(latents, &spec, vae, classifier)?;
    Ok(MorphPath {
        anchor_true,
        anchor_pred,
        poi_position: num_neighbors,
        waypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Prediction;
    use crate::vae::VaeArch;
    use proptest::prelude::*;

    fn lv(values: &[f64]) -> LatentVector {
        LatentVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn path_from_origin() {
        let path = perturb_1d(&LatentVector::zeros(4), 0, 1.0, 2).unwrap();
        let firsts: Vec<f64> = path.iter().map(|z| z.values()[0]).collect();
        assert_eq!(firsts, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert!(path.iter().all(|z| z.values()[1..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn path_preconditions() {
        let z = LatentVector::zeros(3);
        assert!(matches!(perturb_1d(&z, 0, 0.0, 2), Err(Error::Argument(_))));
        assert!(matches!(perturb_1d(&z, 0, -1.0, 2), Err(Error::Argument(_))));
        assert!(matches!(perturb_1d(&z, 3, 1.0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn halving_step_halves_offsets() {
        let z = lv(&[0.3, -1.1, 2.0]);
        let full = perturb_1d(&z, 1, 1.0, 3).unwrap();
        let half = perturb_1d(&z, 1, 0.5, 3).unwrap();
        for (f, h) in full.iter().zip(&half) {
            let (df, dh) = (f.values()[1] - z.values()[1], h.values()[1] - z.values()[1]);
            assert!((dh - df / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_cases() {
        let z = LatentVector::zeros(3);
        assert_eq!(perturb_grid(&z, 0, 1, 1.0, 1, 1).unwrap(), vec![z.clone()]);
        let g = perturb_grid(&z, 0, 1, 1.0, 3, 3).unwrap();
        let cells: Vec<(f64, f64)> = g.iter().map(|v| (v.values()[0], v.values()[1])).collect();
        let mut lattice = Vec::new();
        for a in [-1.0, 0.0, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                lattice.push((a, b));
            }
        }
        assert_eq!(cells, lattice);
        assert_eq!(perturb_grid(&z, 0, 2, 1.0, 9, 9).unwrap().len(), 81);
        assert!(perturb_grid(&z, 1, 1, 1.0, 3, 3).is_err());
        assert!(perturb_grid(&z, 0, 1, 1.0, 4, 3).is_err());
    }

    proptest! {
        #[test]
        fn path_is_symmetric(
            z in proptest::collection::vec(-5.0f64..5.0, 2..12),
            dim_seed in 0usize..100,
            step in 0.01f64..4.0,
            count in 1usize..8,
        ) {
            let z = LatentVector::new(z).unwrap();
            let dim = dim_seed % z.dim();
            let path = perturb_1d(&z, dim, step, count).unwrap();
            prop_assert_eq!(path.len(), 2 * count + 1);
            prop_assert_eq!(&path[count], &z);
            for k in 1..=count {
                for j in 0..z.dim() {
                    let s = path[count + k].values()[j] + path[count - k].values()[j];
                    prop_assert!((s - 2.0 * z.values()[j]).abs() <= 1e-12 * (1.0 + z.values()[j].abs()));
                }
            }
        }

        #[test]
        fn boundary_edges_are_sound_and_complete(
            labels in proptest::collection::vec(0usize..3, 25),
            as_grid in any::<bool>(),
        ) {
            let layout = if as_grid { Layout::Grid { rows: 5, cols: 5 } } else { Layout::Path { len: 25 } };
            let edges = boundary_edges(&labels, layout);
            for i in 0..25 {
                for j in i + 1..25 {
                    let adjacent = if as_grid {
                        (j == i + 1 && j % 5 != 0) || j == i + 5
                    } else {
                        j == i + 1
                    };
                    let expected = adjacent && labels[i] != labels[j];
                    prop_assert_eq!(edges.contains(&(i, j)), expected);
                }
            }
        }
    }

    #[test]
    fn layout_centers() {
        assert_eq!(Layout::Grid { rows: 9, cols: 9 }.center(), 40);
        assert_eq!(Layout::Path { len: 9 }.center(), 4);
        assert_eq!(Layout::Grid { rows: 1, cols: 1 }.center(), 0);
    }

    /// Exhaustive scan over every
    /// item of the class with the full L1 distance; the first minimum wins.
    fn brute_force(latents: &[LatentVector], labels: &[u8], z: &LatentVector, class: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in latents.iter().enumerate() {
            if labels[i] as usize != class {
                continue;
            }
            let d: f64 = v.values().iter().zip(z.values()).map(|(a, b)| (a - b).abs()).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    #[test]
    fn nearest_toy_cases() {
        let latents = vec![lv(&[0.0, 0.0]), lv(&[1.0, 0.0]), lv(&[3.0, 3.0])];
        let index = LatentIndex::from_latents(DatasetName::Mnist, Split::Train, &[2, 2, 2], latents).unwrap();
        assert_eq!(index.nearest_in_class(&lv(&[0.4, 0.0]), 2).unwrap().dataset_index, 0);

        let tied = vec![lv(&[3.0, 3.0]), lv(&[1.0, 0.0]), lv(&[-1.0, 0.0])];
        let index = LatentIndex::from_latents(DatasetName::Mnist, Split::Train, &[5, 5, 5], tied).unwrap();
        let hit = index.nearest_in_class(&lv(&[0.0, 0.0]), 5).unwrap();
        assert_eq!((hit.dataset_index, hit.distance), (1, 1.0));
        assert!(matches!(index.nearest_in_class(&lv(&[0.0, 0.0]), 4), Err(Error::NotFound(_))));
        assert_eq!(index.nearest_excluding(&lv(&[0.0, 0.0]), 5, Some(1)).unwrap().dataset_index, 2);
    }

    proptest! {
        #[test]
        fn nearest_matches_exhaustive_scan(
            raw in proptest::collection::vec(proptest::collection::vec(-3i32..3, 3), 1..60),
            labels_seed in proptest::collection::vec(0u8..4, 60),
            query in proptest::collection::vec(-3.0f64..3.0, 3),
            class in 0usize..4,
        ) {
            // Integer-valued latents produce plenty of exact ties.
            let latents: Vec<LatentVector> = raw.iter().map(|r| lv(&r.iter().map(|&v| v as f64 * 0.5).collect::<Vec<_>>())).collect();
            let labels = &labels_seed[..latents.len()];
            let z = LatentVector::new(query).unwrap();
            let index = LatentIndex::from_latents(DatasetName::Mnist, Split::Test, labels, latents.clone()).unwrap();
            let got = index.nearest_in_class(&z, class).ok().map(|n| n.dataset_index);
            prop_assert_eq!(got, brute_force(&latents, labels, &z, class));
        }
    }

    /// Labels an image by thresholding its mean intensity into two classes.
    struct MeanThreshold {
        low: usize,
        high: usize,
        cut: f32,
    }

    impl ImageClassifier for MeanThreshold {
        fn predict_batch(&self, images: &[Image]) -> Vec<Prediction> {
            images
                .iter()
                .map(|img| {
                    let mean = img.pixels().iter().sum::<f32>() / img.pixels().len() as f32;
                    let label = if mean < self.cut { self.low } else { self.high };
                    let mut class_scores = vec![0.0; NUM_CLASSES];
                    class_scores[label] = 1.0;
                    Prediction { label, class_scores }
                })
                .collect()
        }
    }

    fn mean_intensity(img: &Image) -> f32 {
        img.pixels().iter().sum::<f32>() / img.pixels().len() as f32
    }

    #[test]
    fn identical_latents_have_no_boundary() {
        let vae = Vae::new(VaeArch::new(4), 0);
        let clf = MeanThreshold { low: 1, high: 2, cut: 0.5 };
        let spec = NeighborhoodSpec::Path1d {
            dim: 0,
            step_length: 1.0,
            count_per_side: 2,
        };
        let z = lv(&[0.1, 0.2, 0.3, 0.4]);
        let n = classify_neighborhood(vec![z; 5], &spec, &vae, &clf).unwrap();
        assert!(n.labels.windows(2).all(|w| w[0] == w[1]));
        assert!(n.boundary_edges.is_empty());
        assert!(matches!(
            classify_neighborhood(vec![LatentVector::zeros(4); 4], &spec, &vae, &clf),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            classify_neighborhood(vec![LatentVector::zeros(5); 5], &spec, &vae, &clf),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn differing_path_ends_imply_a_boundary_edge() {
        let vae = Vae::new(VaeArch::new(3), 2);
        let spec = NeighborhoodSpec::Path1d {
            dim: 0,
            step_length: 3.0,
            count_per_side: 4,
        };
        let latents = perturb_1d(&LatentVector::zeros(3), 0, 3.0, 4).unwrap();
        let images = vae.decode_batch(&latents).unwrap();
        let (lo, hi) = (mean_intensity(&images[0]), mean_intensity(&images[8]));
        let clf = MeanThreshold { low: 4, high: 9, cut: (lo + hi) / 2.0 };
        let n = classify_neighborhood(latents, &spec, &vae, &clf).unwrap();
        assert_ne!(n.labels[0], n.labels[8]);
        assert!(!n.boundary_edges.is_empty());
        assert_eq!(n.images[n.center_index], vae.decode(&LatentVector::zeros(3)).unwrap());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let images = (0..n)
            .map(|i| Image::new(vec![(i as f32 / n as f32).min(1.0); 784]).unwrap())
            .collect();
        let labels = (0..n).map(|i| (i % 2) as u8 * 5 + 4).collect();
        Dataset::new(DatasetName::Mnist, Split::Train, images, labels).unwrap()
    }

    #[test]
    fn morph_path_structure() {
        let vae = Vae::new(VaeArch::new(10), 5);
        let clf = MeanThreshold { low: 4, high: 9, cut: 0.5 };
        let ds = toy_dataset(20);
        let index = LatentIndex::build(&ds, &vae);
        let poi = PointOfInterest::new(Image::new(vec![0.45; 784]).unwrap(), 4, None, &vae, &clf).unwrap();
        let poi = PointOfInterest { predicted_label: 9, ..poi };

        let short = morph_path(&poi, &index, 1, &vae, &clf).unwrap();
        assert_eq!(short.waypoints.latents.len(), 3);
        assert_eq!(short.waypoints.latents[0], short.anchor_true.latent);
        assert_eq!(short.waypoints.latents[1], poi.latent);
        assert_eq!(short.waypoints.latents[2], short.anchor_pred.latent);
        assert_eq!(short.anchor_true.label, 4);
        assert_eq!(short.anchor_pred.label, 9);

        let n = 8;
        let path = morph_path(&poi, &index, n, &vae, &clf).unwrap();
        let w = &path.waypoints.latents;
        assert_eq!(w.len(), 2 * n + 1);
        assert_eq!(path.poi_position, n);
        assert_eq!(w[n], poi.latent);
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let first = LatentVector::lerp(&path.anchor_true.latent, &poi.latent, t);
            let second = LatentVector::lerp(&poi.latent, &path.anchor_pred.latent, t);
            for j in 0..10 {
                assert!((w[k].values()[j] - first.values()[j]).abs() < 1e-12);
                assert!((w[n + k].values()[j] - second.values()[j]).abs() < 1e-12);
            }
        }
        // anchors equal an exhaustive search over the encoded class members
        let direct = nearest_in_class(&poi.latent, &ds, 4, &vae).unwrap();
        assert_eq!(direct.dataset_index, path.anchor_true.dataset_index);
        assert!(matches!(morph_path(&poi, &index, 0, &vae, &clf), Err(Error::Argument(_))));
    }

    #[test]
    fn morph_excludes_the_poi_itself() {
        let vae = Vae::new(VaeArch::new(10), 5);
        let clf = MeanThreshold { low: 4, high: 9, cut: 0.5 };
        let ds = toy_dataset(10);
        let index = LatentIndex::build(&ds, &vae);
        let poi = PointOfInterest::from_dataset(&ds, 2, &vae, &clf).unwrap();
        assert_eq!(poi.source, Some((Split::Train, 2)));
        let path = morph_path(&poi, &index, 2, &vae, &clf).unwrap();
        assert_ne!(path.anchor_true.dataset_index, 2);
        assert!(PointOfInterest::from_dataset(&ds, 1_000_000_000, &vae, &clf).is_err());
    }

    #[test]
    fn spec_validation_and_serde() {
        let spec: NeighborhoodSpec = serde_json::from_str(r#"{"kind":"grid_2d","dims":[0,3]}"#).unwrap();
        assert_eq!(
            spec,
            NeighborhoodSpec::Grid2d {
                dims: [0, 3],
                step_length: 1.0,
                rows: 9,
                cols: 9
            }
        );
        assert!(spec.validate(10).is_ok());
        assert!(spec.validate(3).is_err());
        let path: NeighborhoodSpec = serde_json::from_str(r#"{"kind":"path_1d","dim":3}"#).unwrap();
        assert_eq!(path.layout(), Layout::Path { len: 9 });
        let morph: NeighborhoodSpec = serde_json::from_str(r#"{"kind":"morph"}"#).unwrap();
        assert_eq!(morph, NeighborhoodSpec::Morph { num_neighbors: 8 });
        assert!(NeighborhoodSpec::Morph { num_neighbors: 0 }.validate(10).is_err());
        assert!(serde_json::from_str::<NeighborhoodSpec>(r#"{"kind":"path_1d","dim":1,"bogus":2}"#).is_err());
    }
}
