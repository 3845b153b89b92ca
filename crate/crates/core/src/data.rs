//! Synthetic shapes generation and random data splitting.
//!
//! Tiles contain exactly one shape (circle, triangle, rectangle or
//! annulus) of random size and rotation, rasterized by the pixel-center
//! rule, with optional additive Gaussian noise clipped to `[0, 1]`.
//! Generation is independently seeded per tile index, so tile `i` of a
//! run is the same no matter how many tiles are requested.
//!
//! Splitters come in two granularities: whole-image index splits and
//! pixel-level masks (optionally stratified per class), both using
//! largest-remainder rounding.

use alloc::vec::Vec;
use alloc::{format, vec};

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::rng::StreamRng;
use crate::tensor::{LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

/// Class names by label index; 0 is background.
pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "triangle", "rectangle", "annulus"];

/// Shape classes; the discriminant is the segmentation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle = 1,
    Triangle = 2,
    Rectangle = 3,
    Annulus = 4,
}

impl ShapeClass {
    fn from_draw(v: u64) -> ShapeClass {
        match v {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Triangle,
            2 => ShapeClass::Rectangle,
            _ => ShapeClass::Annulus,
        }
    }

    pub fn label(self) -> i32 {
        self as i32
    }
}

/// Geometry actually drawn into a tile, kept for reproducibility checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeProvenance {
    pub seed: u64,
    pub index: u64,
    pub class: ShapeClass,
    /// Bounding-circle diameter in pixels.
    pub size: f64,
    pub rotation_deg: f64,
    pub center: (f64, f64),
}

/// One generated tile: image in `[0, 1]`, its segmentation map, and the
/// parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    pub image: Tensor4<f32>,
    pub class_label: ShapeClass,
    pub seg_map: LabelMap,
    pub provenance: ShapeProvenance,
}

struct Geom {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    /// Bounding-circle radius.
    radius: f64,
    rot: f64,
    aspect: f64,
    inner_ratio: f64,
}

fn inside(geom: &Geom, px: f64, py: f64) -> bool {
    let dx = px - geom.cx;
    let dy = py - geom.cy;
    match geom.class {
        ShapeClass::Circle => dx * dx + dy * dy <= geom.radius * geom.radius,
        ShapeClass::Annulus => {
            let d2 = dx * dx + dy * dy;
            let inner = geom.radius * geom.inner_ratio;
            d2 <= geom.radius * geom.radius && d2 >= inner * inner
        }
        ShapeClass::Rectangle => {
            let (s, c) = num_traits::Float::sin_cos(geom.rot);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let hw = geom.radius / num_traits::Float::sqrt(1.0 + geom.aspect * geom.aspect);
            let hh = geom.aspect * hw;
            u.abs() <= hw && v.abs() <= hh
        }
        ShapeClass::Triangle => {
            // equilateral with the given circumradius, rotated
            let mut vx = [0.0f64; 3];
            let mut vy = [0.0f64; 3];
            for k in 0..3 {
                let phi = geom.rot
                    + core::f64::consts::FRAC_PI_2
                    + k as f64 * 2.0 * core::f64::consts::FRAC_PI_3;
                let (s, c) = num_traits::Float::sin_cos(phi);
                vx[k] = geom.cx + geom.radius * c;
                vy[k] = geom.cy + geom.radius * s;
            }
            let mut sign = 0i8;
            for k in 0..3 {
                let (x1, y1) = (vx[k], vy[k]);
                let (x2, y2) = (vx[(k + 1) % 3], vy[(k + 1) % 3]);
                let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
                let s = if cross > 0.0 {
                    1
                } else if cross < 0.0 {
                    -1
                } else {
                    0
                };
                if s == 0 {
                    continue;
                }
                if sign == 0 {
                    sign = s;
                } else if sign != s {
                    return false;
                }
            }
            true
        }
    }
}

fn rasterize(geom: &Geom, tile: usize) -> Vec<bool> {
    let mut out = vec![false; tile * tile];
    for y in 0..tile {
        for x in 0..tile {
            // a pixel is foreground iff its center lies inside the shape
            if inside(geom, x as f64 + 0.5, y as f64 + 0.5) {
                out[y * tile + x] = true;
            }
        }
    }
    out
}

fn gen_tile(tile: usize, noise_sigma: f64, seed: u64, index: u64) -> ShapesSample {
    let mut rng = StreamRng::keyed(seed, "tile", index);
    let class = ShapeClass::from_draw(rng.below(4));
    let size = rng.uniform(0.2, 0.8) * tile as f64;
    let rot_deg = rng.uniform(0.0, 360.0);
    let aspect = rng.uniform(0.4, 1.0);
    let inner_ratio = rng.uniform(0.3, 0.7);
    let margin = size / 2.0 + 1.0;
    let cx = rng.uniform(margin, tile as f64 - margin);
    let cy = rng.uniform(margin, tile as f64 - margin);
    let geom = Geom {
        class,
        cx,
        cy,
        radius: size / 2.0,
        rot: rot_deg.to_radians(),
        aspect,
        inner_ratio,
    };
    let fg = rasterize(&geom, tile);
    let mut pixels: Vec<f32> = fg.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    if noise_sigma > 0.0 {
        let mut noise = StreamRng::keyed(seed, "noise", index);
        for p in pixels.iter_mut() {
            let v = *p as f64 + noise.normal() * noise_sigma;
            *p = v.clamp(0.0, 1.0) as f32;
        }
    }
    let seg: Vec<i32> = fg
        .iter()
        .map(|&f| if f { class.label() } else { 0 })
        .collect();
    ShapesSample {
        image: Tensor4::new([1, 1, tile, tile], pixels).expect("sized"),
        class_label: class,
        seg_map: LabelMap::new([1, tile, tile], seg).expect("sized"),
        provenance: ShapeProvenance {
            seed,
            index,
            class,
            size,
            rotation_deg: rot_deg,
            center: (cx, cy),
        },
    }
}

/// Generates `n` shape tiles, deterministically per `(seed, index)`.
pub fn gen_shapes(n: usize, tile: usize, noise_sigma: f64, seed: u64) -> Result<Vec<ShapesSample>> {
    if tile < 16 {
        return Err(Error::config(format!("tile size must be >= 16, got {tile}")));
    }
    if noise_sigma < 0.0 {
        return Err(Error::config("noise_sigma must be >= 0"));
    }
    Ok((0..n as u64)
        .map(|i| gen_tile(tile, noise_sigma, seed, i))
        .collect())
}

/// Samples stacked along the batch axis, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesBatch {
    pub images: Tensor4<f32>,
    pub seg: LabelMap,
    pub class_labels: Vec<i32>,
}

pub fn stack_samples(samples: &[ShapesSample]) -> Result<ShapesBatch> {
    if samples.is_empty() {
        return Err(Error::usage("cannot stack zero samples"));
    }
    let [_, _, h, w] = samples[0].image.shape();
    let mut pixels = Vec::with_capacity(samples.len() * h * w);
    let mut seg = Vec::with_capacity(samples.len() * h * w);
    let mut class_labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != [1, 1, h, w] {
            return Err(Error::dim("samples have mixed tile sizes"));
        }
        pixels.extend_from_slice(s.image.data());
        seg.extend_from_slice(s.seg_map.data());
        class_labels.push(s.class_label.label());
    }
    Ok(ShapesBatch {
        images: Tensor4::new([samples.len(), 1, h, w], pixels)?,
        seg: LabelMap::new([samples.len(), h, w], seg)?,
        class_labels,
    })
}

/// Counts 4-connected background components of one tile of a label map.
/// A solid shape leaves one; an annulus leaves two (outside plus hole).
pub fn background_components(seg: &LabelMap, item: usize) -> usize {
    let [_, h, w] = seg.shape();
    let mut visited = vec![false; h * w];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if visited[start] || seg.at(item, start / w, start % w) != 0 {
            continue;
        }
        components += 1;
        stack.push(start);
        visited[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |yy: usize, xx: usize, stack: &mut Vec<usize>| {
                let q = yy * w + xx;
                if !visited[q] && seg.at(item, yy, xx) == 0 {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(y - 1, x, &mut stack);
            }
            if y + 1 < h {
                push(y + 1, x, &mut stack);
            }
            if x > 0 {
                push(y, x - 1, &mut stack);
            }
            if x + 1 < w {
                push(y, x + 1, &mut stack);
            }
        }
    }
    components
}

/// Largest-remainder apportionment of `n` items over `fractions`;
/// remainder ties break toward the lower index.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut base: Vec<usize> = fractions.iter().map(|f| (f * n as f64) as usize).collect();
    let assigned: usize = base.iter().sum();
    let mut remainders: Vec<(usize, f64)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * n as f64 - base[i] as f64))
        .collect();
    // sort by remainder descending, index ascending on ties
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        base[remainders[k % remainders.len()].0] += 1;
    }
    base
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::config("split fractions must be non-negative"));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    Ok(())
}

/// Random disjoint exhaustive split of item indices into
/// (train, validation, test) lists.
pub fn split_images(
    n_items: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    check_fractions(fractions)?;
    let mut perm: Vec<usize> = (0..n_items).collect();
    StreamRng::new(seed, "split_images").shuffle(&mut perm);
    let sizes = apportion(n_items, &[fractions.0, fractions.1, fractions.2]);
    let train = perm[..sizes[0]].to_vec();
    let val = perm[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = perm[sizes[0] + sizes[1]..].to_vec();
    Ok([train, val, test])
}

/// Disjoint pixel-level masks over the labeled pixels of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMasks {
    pub train: PixelMask,
    pub val: PixelMask,
    pub test: Option<PixelMask>,
}

impl SplitMasks {
    pub fn are_disjoint(&self) -> bool {
        let tv = self.train.is_disjoint_with(&self.val);
        match &self.test {
            Some(t) => {
                tv && self.train.is_disjoint_with(t) && self.val.is_disjoint_with(t)
            }
            None => tv,
        }
    }
}

/// Assigns every labeled (non-sentinel) pixel to exactly one of the
/// train/validation/test masks. When `stratified`, each class present in
/// `labels` is split at the requested fractions independently (classes
/// `0..=max` must all be populated).
pub fn split_pixels(
    labels: &LabelMap,
    fractions: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<SplitMasks> {
    check_fractions(fractions)?;
    let shape = labels.shape();
    let max_class = labels
        .max_class()
        .ok_or_else(|| Error::config("cannot split: every pixel is unlabeled"))?;

    let mut groups: Vec<Vec<usize>> = Vec::new();
    if stratified {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); max_class as usize + 1];
        for (i, &v) in labels.data().iter().enumerate() {
            if v >= 0 {
                per_class[v as usize].push(i);
            }
        }
        for (c, pixels) in per_class.iter().enumerate() {
            if pixels.is_empty() {
                return Err(Error::config(format!(
                    "stratified split: class {c} has no labeled pixels"
                )));
            }
        }
        groups = per_class;
    } else {
        groups.push(
            labels
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v >= 0)
                .map(|(i, _)| i)
                .collect(),
        );
    }

    let mut train = PixelMask::filled(shape, false);
    let mut val = PixelMask::filled(shape, false);
    let mut test = PixelMask::filled(shape, false);
    for (c, group) in groups.iter().enumerate() {
        let mut order = group.clone();
        StreamRng::keyed(seed, "split_pixels", c as u64).shuffle(&mut order);
        let sizes = apportion(order.len(), &[fractions.0, fractions.1, fractions.2]);
        for (slot, &pix) in order.iter().enumerate() {
            if slot < sizes[0] {
                train.data_mut()[pix] = true;
            } else if slot < sizes[0] + sizes[1] {
                val.data_mut()[pix] = true;
            } else {
                test.data_mut()[pix] = true;
            }
        }
    }
    Ok(SplitMasks {
        train,
        val,
        test: (fractions.2 > 0.0).then_some(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_area_matches_analytic_within_tolerance() {
        let mut checked = 0;
        for idx in 0..40 {
            let s = gen_tile(64, 0.0, 900, idx);
            if s.class_label != ShapeClass::Circle {
                continue;
            }
            let count = s.seg_map.data().iter().filter(|&&v| v > 0).count() as f64;
            let r = s.provenance.size / 2.0;
            let analytic = core::f64::consts::PI * r * r;
            let rel = (count - analytic).abs() / analytic;
            assert!(rel < 0.05, "tile {idx}: count {count} vs {analytic}");
            checked += 1;
        }
        assert!(checked > 3, "need several circle tiles, got {checked}");
    }

    #[test]
    fn circle_raster_ignores_rotation() {
        let base = Geom {
            class: ShapeClass::Circle,
            cx: 31.7,
            cy: 30.2,
            radius: 13.3,
            rot: 0.0,
            aspect: 1.0,
            inner_ratio: 0.5,
        };
        let a = rasterize(&base, 64);
        let rotated = Geom { rot: 2.1, ..base };
        let b = rasterize(&rotated, 64);
        assert_eq!(a, b);
        assert_eq!(
            a.iter().filter(|&&v| v).count(),
            b.iter().filter(|&&v| v).count()
        );
    }

    #[test]
    fn shapes_fit_fully_inside_the_tile() {
        for idx in 0..200 {
            let s = gen_tile(64, 0.0, 31, idx);
            let seg = &s.seg_map;
            for y in 0..64 {
                for x in 0..64 {
                    if y == 0 || y == 63 || x == 0 || x == 63 {
                        assert_eq!(seg.at(0, y, x), 0, "tile {idx} touches the border");
                    }
                }
            }
            // exactly one shape class present
            let classes: alloc::collections::BTreeSet<i32> =
                seg.data().iter().copied().filter(|&v| v > 0).collect();
            assert_eq!(classes.len(), 1, "tile {idx}");
        }
    }

    #[test]
    fn class_histogram_is_uniform_within_three_sigma() {
        let n = 10_000;
        let mut counts = [0usize; 4];
        for s in gen_shapes(n, 16, 0.0, 5).unwrap() {
            counts[s.class_label.label() as usize - 1] += 1;
        }
        let expect = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expect).abs() <= 3.0 * sigma,
                "class {c}: {count}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_and_index_keyed() {
        let a = gen_shapes(5, 32, 0.1, 77).unwrap();
        let b = gen_shapes(5, 32, 0.1, 77).unwrap();
        assert_eq!(a, b);
        // tile i does not depend on how many tiles were requested
        let c = gen_shapes(3, 32, 0.1, 77).unwrap();
        assert_eq!(&a[..3], &c[..]);
        let d = gen_shapes(5, 32, 0.1, 78).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn noise_is_clipped_to_unit_interval() {
        for s in gen_shapes(10, 16, 0.5, 3).unwrap() {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn annulus_has_a_hole_and_solids_do_not() {
        for idx in 0..60 {
            let s = gen_tile(64, 0.0, 123, idx);
            let components = background_components(&s.seg_map, 0);
            let want = if s.class_label == ShapeClass::Annulus {
                2
            } else {
                1
            };
            assert_eq!(components, want, "tile {idx} ({:?})", s.class_label);
        }
    }

    #[test]
    fn image_split_basics() {
        let [train, val, test] = split_images(10, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(train.len(), 10);
        assert!(val.is_empty() && test.is_empty());

        let [train, val, test] = split_images(10, (0.8, 0.2, 0.0), 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 2, 0));

        let mut sorted: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn image_split_rejects_bad_fractions() {
        assert!(split_images(10, (0.5, 0.2, 0.0), 1).is_err());
        assert!(split_images(10, (-0.1, 1.1, 0.0), 1).is_err());
    }

    #[test]
    fn different_seeds_permute_differently() {
        let mut distinct = 0;
        for s in 0..100u64 {
            let [a, _, _] = split_images(20, (0.5, 0.5, 0.0), s).unwrap();
            let [b, _, _] = split_images(20, (0.5, 0.5, 0.0), s + 1000).unwrap();
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 seed pairs differed");
    }

    #[test]
    fn pixel_split_single_class_halves() {
        let labels = LabelMap::filled([1, 10, 10], 0);
        let masks = split_pixels(&labels, (0.5, 0.5, 0.0), 9, true).unwrap();
        let t = masks.train.count() as i64;
        let v = masks.val.count() as i64;
        assert!((t - v).abs() <= 1);
        assert_eq!(t + v, 100);
        assert!(masks.test.is_none());
        assert!(masks.are_disjoint());
    }

    #[test]
    fn pixel_split_rejects_sentinel_only_and_empty_class() {
        let labels = LabelMap::filled([1, 4, 4], -1);
        assert!(split_pixels(&labels, (0.8, 0.2, 0.0), 0, true).is_err());
        // class 1 missing while class 2 present
        let mut data = vec![0i32; 16];
        data[3] = 2;
        let labels = LabelMap::new([1, 4, 4], data).unwrap();
        assert!(split_pixels(&labels, (0.8, 0.2, 0.0), 0, true).is_err());
    }

    #[test]
    fn stratified_split_preserves_class_ratio() {
        // 10:2 background-to-foreground labeling
        let mut data = vec![0i32; 120];
        for v in data.iter_mut().take(20) {
            *v = 1;
        }
        let labels = LabelMap::new([1, 10, 12], data).unwrap();
        let masks = split_pixels(&labels, (0.8, 0.2, 0.0), 4, true).unwrap();
        let fg_train = labels
            .data()
            .iter()
            .zip(masks.train.data())
            .filter(|(&l, &m)| m && l == 1)
            .count();
        let bg_train = labels
            .data()
            .iter()
            .zip(masks.train.data())
            .filter(|(&l, &m)| m && l == 0)
            .count();
        assert_eq!(fg_train, 16); // 0.8 * 20
        assert_eq!(bg_train, 80); // 0.8 * 100
        assert!(masks.are_disjoint());
    }

    #[test]
    fn pixel_split_is_exhaustive_over_labeled_pixels() {
        for seed in 0..50u64 {
            let mut rng = StreamRng::new(seed, "labels");
            let data: Vec<i32> = (0..64)
                .map(|_| match rng.below(4) {
                    0 => -1,
                    v => v as i32 - 1,
                })
                .collect();
            if !data.contains(&0) || !data.contains(&1) || !data.contains(&2) {
                continue;
            }
            let labels = LabelMap::new([1, 8, 8], data).unwrap();
            let masks = split_pixels(&labels, (0.6, 0.3, 0.1), seed, true).unwrap();
            assert!(masks.are_disjoint());
            let test = masks.test.as_ref().unwrap();
            for (i, &l) in labels.data().iter().enumerate() {
                let covered = masks.train.data()[i] as u8
                    + masks.val.data()[i] as u8
                    + test.data()[i] as u8;
                if l >= 0 {
                    assert_eq!(covered, 1, "seed {seed} pixel {i}");
                } else {
                    assert_eq!(covered, 0, "seed {seed} sentinel pixel {i}");
                }
            }
        }
    }
}
