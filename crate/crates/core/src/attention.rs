//! Attention-guided localization: class activation maps from cached conv
//! features and head weights, threshold masks, bounding-box extraction,
//! cropping, and region erasure.

use crate::nn::{ForwardCache, LayerSpec, NetError, Network};
use crate::raster::{GrayImage, RasterError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("features {features:?} and head weights {weights:?} disagree on channels")]
    ShapeMismatch {
        features: Vec<usize>,
        weights: Vec<usize>,
    },
    #[error("class index {class} out of range 1..={t_max}")]
    ClassOutOfRange { class: usize, t_max: usize },
    #[error("no region found at threshold {tau}; try a lower threshold")]
    NoRegionFound { tau: f32 },
    #[error("network has no global pooling layer; cannot take attention maps")]
    NoPoolLayer,
    #[error("network has no dense head after pooling")]
    NoDenseHead,
    #[error("box {0:?} is degenerate or outside the {1}x{2} image")]
    BadBox(RegionBox, usize, usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an attention-map file")]
    BadMapFile,
}

/// Which localized region a box refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Hand,
    Region1,
    Region2,
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegionKind::Hand => "hand",
            RegionKind::Region1 => "region1",
            RegionKind::Region2 => "region2",
        };
        f.write_str(s)
    }
}

impl FromStr for RegionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hand" => Ok(RegionKind::Hand),
            "region1" => Ok(RegionKind::Region1),
            "region2" => Ok(RegionKind::Region2),
            other => Err(format!("unknown region kind {other:?}")),
        }
    }
}

/// Axis-aligned box in original-image pixels, inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBox {
    pub kind: RegionKind,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionBox {
    pub fn new(kind: RegionKind, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { kind, x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_valid_within(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &RegionBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Heat map for one class, tied to the source image size it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// 1-based class (age) index the map was taken for.
    pub class: usize,
    /// `(height, width)` of the original image in pixels.
    pub source_size: (usize, usize),
}

impl AttentionMap {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Rescales values to `[0,100]` so thresholds are scale-free. A constant
    /// map becomes all zeros.
    pub fn normalized(&self) -> AttentionMap {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|&v| (v - lo) / span * 100.0).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        AttentionMap {
            values,
            ..self.clone()
        }
    }

    /// Portable float-grid dump. Layout: magic `AMAP`, u32 version (1),
    /// u32 height, u32 width, u32 class, u32 source height, u32 source
    /// width, then `height*width` row-major f32 LE values.
    pub fn write_file(&self, path: &Path) -> Result<(), AttentionError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"AMAP")?;
        for v in [
            1u32,
            self.height as u32,
            self.width as u32,
            self.class as u32,
            self.source_size.0 as u32,
            self.source_size.1 as u32,
        ] {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, AttentionError> {
        let mut f = std::fs::File::open(path)?;
        let mut head = [0u8; 28];
        f.read_exact(&mut head).map_err(|_| AttentionError::BadMapFile)?;
        if &head[0..4] != b"AMAP" {
            return Err(AttentionError::BadMapFile);
        }
        let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
        if u(4) != 1 {
            return Err(AttentionError::BadMapFile);
        }
        let (h, w, class, sh, sw) = (u(8), u(12), u(16), u(20), u(24));
        let mut bytes = vec![0u8; h * w * 4];
        f.read_exact(&mut bytes).map_err(|_| AttentionError::BadMapFile)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(AttentionMap {
            values,
            height: h,
            width: w,
            class,
            source_size: (sh, sw),
        })
    }
}

/// Pointwise `>= tau` mask over an attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub tau: f32,
}

impl BinaryMask {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `A_t(i,j) = sum_k W[k][t] * F[i][j][k]` over the head weight column for
/// class `t` (1-based). Accumulates in f64.
pub fn cam(
    features: &Tensor<f32>,
    head_weights: &Tensor<f32>,
    class: usize,
    source_size: (usize, usize),
) -> Result<AttentionMap, AttentionError> {
    if features.rank() != 3 || head_weights.rank() != 2
        || features.shape()[2] != head_weights.shape()[0]
    {
        return Err(AttentionError::ShapeMismatch {
            features: features.shape().to_vec(),
            weights: head_weights.shape().to_vec(),
        });
    }
    let t_max = head_weights.shape()[1];
    if class < 1 || class > t_max {
        return Err(AttentionError::ClassOutOfRange { class, t_max });
    }
    let (h, w, c) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let col = class - 1;
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f64;
            for k in 0..c {
                acc += features.at3(i, j, k) as f64 * head_weights.at2(k, col) as f64;
            }
            values.push(acc as f32);
        }
    }
    Ok(AttentionMap {
        values,
        height: h,
        width: w,
        class,
        source_size,
    })
}

/// Exact pointwise comparison; ties (`== tau`) are inside the mask.
pub fn threshold_mask(map: &AttentionMap, tau: f32) -> BinaryMask {
    BinaryMask {
        bits: map.values.iter().map(|&v| v >= tau).collect(),
        height: map.height,
        width: map.width,
        tau,
    }
}

/// Bilinear resize of a heat map, typically up to the original image size.
pub fn resize_map(map: &AttentionMap, new_height: usize, new_width: usize) -> AttentionMap {
    let src = GrayImage::from_data(map.width, map.height, map.values.clone())
        .expect("attention map is non-empty");
    let out = src
        .resize(new_width, new_height)
        .expect("target dims checked by caller");
    AttentionMap {
        values: out.data().to_vec(),
        height: new_height,
        width: new_width,
        class: map.class,
        source_size: map.source_size,
    }
}

/// Tight bounding box of the largest 4-connected true component. Area ties
/// break toward the component whose first pixel comes earliest in raster
/// order (topmost, then leftmost).
pub fn mask_to_box(mask: &BinaryMask, kind: RegionKind) -> Result<RegionBox, AttentionError> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, RegionBox)> = None; // (area, box)
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        // flood fill this component
        let mut area = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut push = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        let candidate = RegionBox::new(kind, x0, y0, x1, y1);
        // strictly-greater keeps the earliest component on ties
        if best.as_ref().map_or(true, |(a, _)| area > *a) {
            best = Some((area, candidate));
        }
    }
    best.map(|(_, b)| b)
        .ok_or(AttentionError::NoRegionFound { tau: mask.tau })
}

/// Crops `bbox` out of `image` and resamples it to a square of `out_size`.
pub fn crop(
    image: &GrayImage,
    bbox: &RegionBox,
    out_size: usize,
) -> Result<GrayImage, AttentionError> {
    if !bbox.is_valid_within(image.width(), image.height()) {
        return Err(AttentionError::BadBox(*bbox, image.width(), image.height()));
    }
    let mut sub = GrayImage::new(bbox.width(), bbox.height())?;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            sub.set(x - bbox.x0, y - bbox.y0, image.get(x, y));
        }
    }
    Ok(sub.resize(out_size, out_size)?)
}

/// Replaces the pixels inside `bbox` with seeded uniform noise over `[0,1]`;
/// pixels outside the box are untouched.
pub fn erase_region(
    image: &GrayImage,
    bbox: &RegionBox,
    seed: u64,
) -> Result<GrayImage, AttentionError> {
    if !bbox.is_valid_within(image.width(), image.height()) {
        return Err(AttentionError::BadBox(*bbox, image.width(), image.height()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            out.set(x, y, rng.gen::<f32>());
        }
    }
    Ok(out)
}

/// How `localize` prepares the input and interprets the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    /// Square side the image is resized to before the forward pass.
    pub input_size: usize,
    /// Threshold applied to the (optionally normalized) map.
    pub tau: f32,
    /// Rescale the map to `[0,100]` before thresholding.
    pub normalize: bool,
}

/// Runs cam -> resize -> threshold -> box on one image with a trained
/// classifier. The class is the argmax of the predicted distribution; box
/// coordinates are in original-image pixels.
pub fn localize(
    net: &Network<f32>,
    image: &GrayImage,
    kind: RegionKind,
    params: &LocalizeParams,
) -> Result<(RegionBox, AttentionMap), AttentionError> {
    let map = attention_map(net, image, params.input_size)?;
    let map = resize_map(&map, image.height(), image.width());
    let thresh_src = if params.normalize { map.normalized() } else { map.clone() };
    let mask = threshold_mask(&thresh_src, params.tau);
    let bbox = mask_to_box(&mask, kind)?;
    Ok((bbox, map))
}

/// Attention map at feature resolution for the argmax class of `image`.
pub fn attention_map(
    net: &Network<f32>,
    image: &GrayImage,
    input_size: usize,
) -> Result<AttentionMap, AttentionError> {
    let resized = image.resize(input_size, input_size)?;
    let input = Tensor::new(
        vec![input_size, input_size, 1],
        resized.data().to_vec(),
    )
    .expect("resize yields matching buffer");
    let cache = net.forward_cached(&input, None)?;
    let class = argmax_class(&cache.output);
    cam_from_cache(net, &cache, class, (image.height(), image.width()))
}

/// CAM for an explicit class from an existing forward cache.
pub fn cam_from_cache(
    net: &Network<f32>,
    cache: &ForwardCache<f32>,
    class: usize,
    source_size: (usize, usize),
) -> Result<AttentionMap, AttentionError> {
    let features = cache.pooled_features(net).ok_or(AttentionError::NoPoolLayer)?;
    let head = head_dense_weight(net).ok_or(AttentionError::NoDenseHead)?;
    cam(features, head, class, source_size)
}

/// Weight matrix `[C, T]` of the last dense layer.
pub fn head_dense_weight(net: &Network<f32>) -> Option<&Tensor<f32>> {
    net.spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        .map(|i| &net.params()[i][0])
}

/// 1-based index of the largest head output (first max on ties).
pub fn argmax_class(output: &Tensor<f32>) -> usize {
    let mut best = 0usize;
    for (i, &v) in output.data().iter().enumerate() {
        if v > output.data()[best] {
            best = i;
        }
    }
    best + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    fn map_from(values: Vec<f32>, h: usize, w: usize) -> AttentionMap {
        AttentionMap {
            values,
            height: h,
            width: w,
            class: 1,
            source_size: (h, w),
        }
    }

    #[test]
    fn cam_with_zero_weights_is_zero() {
        let f = Tensor::new(vec![2, 2, 3], vec![1.0; 12]).unwrap();
        let w = Tensor::zeros(vec![3, 5]);
        let a = cam(&f, &w, 2, (8, 8)).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_with_unit_single_channel_copies_features() {
        let grid = vec![0.5, -1.0, 2.0, 0.25];
        let f = Tensor::new(vec![2, 2, 1], grid.clone()).unwrap();
        let w = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let a = cam(&f, &w, 2, (2, 2)).unwrap();
        assert_eq!(a.values, grid);
    }

    #[test]
    fn cam_mean_equals_gap_logit() {
        // Random GAP-headed net: spatial mean of A_t must equal logit t.
        let spec = NetworkSpec {
            input_shape: vec![16, 16, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 7, bias: false },
                LayerSpec::Softmax,
            ],
            seed: 5150,
        };
        let net = Network::init(spec).unwrap();
        let input = Tensor::new(
            vec![16, 16, 1],
            (0..256).map(|i| ((i * 31 % 101) as f32) / 101.0).collect(),
        )
        .unwrap();
        let cache = net.forward_cached(&input, None).unwrap();
        let logits = cache.logits(&net).clone();
        for t in 1..=7 {
            let a = cam_from_cache(&net, &cache, t, (16, 16)).unwrap();
            let diff = (a.mean() - logits.data()[t - 1] as f64).abs();
            assert!(diff < 1e-5, "class {t}: {diff}");
        }
    }

    #[test]
    fn threshold_edge_cases() {
        let m = map_from(vec![0.0; 9], 3, 3);
        assert_eq!(threshold_mask(&m, 50.0).count(), 0);
        // tau at the minimum keeps everything (>= comparison)
        let m2 = map_from((0..9).map(|i| i as f32).collect(), 3, 3);
        assert_eq!(threshold_mask(&m2, 0.0).count(), 9);
        assert_eq!(threshold_mask(&m2, 8.0).count(), 1);
    }

    #[test]
    fn mask_shrinks_as_tau_grows() {
        let m = map_from((0..64).map(|i| ((i * 29) % 64) as f32).collect(), 8, 8);
        let mut prev = usize::MAX;
        for tau in [0.0, 10.0, 25.0, 40.0, 63.0] {
            let c = threshold_mask(&m, tau).count();
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn single_bit_box() {
        let mut bits = vec![false; 8 * 8];
        bits[3 * 8 + 5] = true;
        let mask = BinaryMask {
            bits,
            height: 8,
            width: 8,
            tau: 0.0,
        };
        let b = mask_to_box(&mask, RegionKind::Region1).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (5, 3, 6, 4));
    }

    #[test]
    fn full_mask_box_covers_everything() {
        let mask = BinaryMask {
            bits: vec![true; 6 * 4],
            height: 4,
            width: 6,
            tau: 0.0,
        };
        let b = mask_to_box(&mask, RegionKind::Hand).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0, 0, 6, 4));
    }

    #[test]
    fn larger_component_wins() {
        // 4x3 block (12 px) vs 3x3 block (9 px), separated.
        let mut bits = vec![false; 16 * 16];
        for y in 1..4 {
            for x in 1..5 {
                bits[y * 16 + x] = true;
            }
        }
        for y in 10..13 {
            for x in 10..13 {
                bits[y * 16 + x] = true;
            }
        }
        let mask = BinaryMask {
            bits,
            height: 16,
            width: 16,
            tau: 0.0,
        };
        let b = mask_to_box(&mask, RegionKind::Region1).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (1, 1, 5, 4));
    }

    #[test]
    fn empty_mask_reports_tau() {
        let mask = BinaryMask {
            bits: vec![false; 4],
            height: 2,
            width: 2,
            tau: 77.5,
        };
        match mask_to_box(&mask, RegionKind::Region2).unwrap_err() {
            AttentionError::NoRegionFound { tau } => assert_eq!(tau, 77.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crop_of_full_image_at_same_size_is_identity() {
        let img = GrayImage::from_data(
            6,
            6,
            (0..36).map(|i| i as f32 / 36.0).collect(),
        )
        .unwrap();
        let b = RegionBox::new(RegionKind::Hand, 0, 0, 6, 6);
        let out = crop(&img, &b, 6).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = GrayImage::from_data(10, 10, vec![0.6; 100]).unwrap();
        let b = RegionBox::new(RegionKind::Region1, 2, 3, 7, 9);
        let out = crop(&img, &b, 16).unwrap();
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let img = GrayImage::new(8, 8).unwrap();
        let b = RegionBox::new(RegionKind::Region1, 3, 3, 3, 5);
        assert!(crop(&img, &b, 4).is_err());
        let outside = RegionBox::new(RegionKind::Region1, 5, 5, 12, 9);
        assert!(crop(&img, &outside, 4).is_err());
    }

    #[test]
    fn erase_is_deterministic_and_leaves_outside_untouched() {
        let img = GrayImage::from_data(8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let b = RegionBox::new(RegionKind::Region1, 2, 2, 5, 6);
        let a = erase_region(&img, &b, 99).unwrap();
        let c = erase_region(&img, &b, 99).unwrap();
        assert_eq!(a, c);
        let d = erase_region(&img, &b, 100).unwrap();
        assert_ne!(a, d);
        for y in 0..8 {
            for x in 0..8 {
                if !b.contains(x, y) {
                    assert_eq!(a.get(x, y).to_bits(), img.get(x, y).to_bits());
                }
            }
        }
    }

    #[test]
    fn erased_mean_is_near_uniform_mean() {
        let img = GrayImage::new(64, 64).unwrap();
        let b = RegionBox::new(RegionKind::Region1, 0, 0, 64, 64);
        let e = erase_region(&img, &b, 4242).unwrap();
        let n = (64 * 64) as f64;
        let mean: f64 = e.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        // three standard errors of a uniform [0,1] mean over 4096 samples
        let se = (1.0f64 / 12.0).sqrt() / n.sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn resized_mask_area_scales_quadratically_for_smooth_maps() {
        // Gaussian bump, upscale 4x: thresholded area within 10% of scale^2.
        let (h, w) = (32, 32);
        let mut values = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let dy = i as f32 - 15.5;
                let dx = j as f32 - 15.5;
                values[i * w + j] = (-(dx * dx + dy * dy) / 72.0).exp();
            }
        }
        let m = map_from(values, h, w);
        let tau = 0.5;
        let src_area = threshold_mask(&m, tau).count();
        let up = resize_map(&m, h * 4, w * 4);
        let up_area = threshold_mask(&up, tau).count();
        let expected = src_area * 16;
        let rel = (up_area as f64 - expected as f64).abs() / expected as f64;
        assert!(rel < 0.10, "src {src_area} up {up_area} rel {rel}");
    }

    #[test]
    fn map_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.amap");
        let m = AttentionMap {
            values: (0..12).map(|i| i as f32 * 0.5 - 2.0).collect(),
            height: 3,
            width: 4,
            class: 42,
            source_size: (64, 64),
        };
        m.write_file(&path).unwrap();
        let back = AttentionMap::read_file(&path).unwrap();
        assert_eq!(m, back);
    }
}
