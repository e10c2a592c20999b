//! Images, datasets, the synthetic task, and the pixel transforms the
//! detector applies (grayscale, tiling, clipping).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

/// BT.601 luma weights for (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const MAGIC: &[u8; 4] = b"UAPD";
const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Channel-major image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, pixels: Vec<f64>) -> Result<Self> {
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::InvalidShape(format!(
                "images have 1 or 3 channels, got {}",
                shape.channels
            )));
        }
        Error::check_dim(shape.len(), pixels.len())?;
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Self { shape, pixels })
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`.
    pub fn clamped(shape: Shape, mut pixels: Vec<f64>) -> Result<Self> {
        clamp_unit(&mut pixels);
        Self::new(shape, pixels)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

fn clamp_unit(values: &mut [f64]) {
    for v in values {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Error::check_dim(images.len(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::InvalidShape("dataset images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of the images; `None` for an empty dataset.
    pub fn shape(&self) -> Option<Shape> {
        self.images.first().map(Image::shape)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// Dataset restricted to `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        ImageDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Non-overlapping `P × P` tiling of an `H × W` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    height: usize,
    width: usize,
    tile_size: usize,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile_size: usize) -> Result<Self> {
        if tile_size == 0 || !height.is_multiple_of(tile_size) || !width.is_multiple_of(tile_size) {
            return Err(Error::InvalidShape(format!(
                "tile size {tile_size} does not divide {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            tile_size,
        })
    }

    /// `P = 8` for images of 16×16 and up, `P = 4` below.
    pub fn default_for(height: usize, width: usize) -> Result<Self> {
        let p = if height.min(width) >= 16 { 8 } else { 4 };
        Self::new(height, width, p)
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn tiles_per_image(&self) -> usize {
        (self.height / self.tile_size) * (self.width / self.tile_size)
    }

    pub fn tile_dim(&self) -> usize {
        self.tile_size * self.tile_size
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of grayscale pixels covered (`n · P²`).
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Plane index of element `e` of tile `i`. Row-major block order,
    /// row-major within the tile.
    #[inline]
    pub fn pixel_index(&self, tile: usize, elem: usize) -> usize {
        let p = self.tile_size;
        let blocks_x = self.width / p;
        let (by, bx) = (tile / blocks_x, tile % blocks_x);
        let (dy, dx) = (elem / p, elem % p);
        (by * p + dy) * self.width + bx * p + dx
    }
}

/// Luma of a channel-major buffer; a single-channel buffer is copied.
pub fn grayscale_values(shape: Shape, values: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(shape.len(), values.len())?;
    match shape.channels {
        1 => Ok(values.to_vec()),
        3 => {
            let plane = shape.plane();
            let (r, rest) = values.split_at(plane);
            let (g, b) = rest.split_at(plane);
            Ok((0..plane)
                .map(|i| LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i])
                .collect())
        }
        c => Err(Error::InvalidShape(format!(
            "cannot grayscale {c} channels"
        ))),
    }
}

pub fn grayscale(img: &Image) -> Image {
    let shape = img.shape();
    let gray = grayscale_values(shape, img.pixels()).expect("image shape is validated");
    let out_shape = Shape::new(1, shape.height, shape.width);
    // Convex combination of [0, 1] values; clamp away rounding above 1.
    Image::clamped(out_shape, gray).expect("grayscale shape is valid")
}

/// Splits a grayscale plane into tiles.
pub fn tile_values(plane: &[f64], layout: &TileLayout) -> Result<Vec<Vec<f64>>> {
    Error::check_dim(layout.plane(), plane.len())?;
    Ok((0..layout.tiles_per_image())
        .map(|t| {
            (0..layout.tile_dim())
                .map(|e| plane[layout.pixel_index(t, e)])
                .collect()
        })
        .collect())
}

pub fn tile(gray: &Image, layout: &TileLayout) -> Result<Vec<Vec<f64>>> {
    let s = gray.shape();
    if s.channels != 1 || s.height != layout.height() || s.width != layout.width() {
        return Err(Error::InvalidShape(format!(
            "layout is for 1x{}x{}, image is {}x{}x{}",
            layout.height(),
            layout.width(),
            s.channels,
            s.height,
            s.width
        )));
    }
    tile_values(gray.pixels(), layout)
}

/// Inverse of [`tile_values`].
pub fn untile(tiles: &[Vec<f64>], layout: &TileLayout) -> Result<Vec<f64>> {
    Error::check_dim(layout.tiles_per_image(), tiles.len())?;
    let mut plane = vec![0.0; layout.plane()];
    for (t, tile) in tiles.iter().enumerate() {
        Error::check_dim(layout.tile_dim(), tile.len())?;
        for (e, v) in tile.iter().enumerate() {
            plane[layout.pixel_index(t, e)] = *v;
        }
    }
    Ok(plane)
}

pub fn clip_image(img: &Image) -> Image {
    let mut pixels = img.pixels().to_vec();
    clamp_unit(&mut pixels);
    Image {
        shape: img.shape(),
        pixels,
    }
}

/// Parameters of the synthetic classification task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub shape: Shape,
    pub class_separation: f64,
    pub noise_sd: f64,
}

/// The noiseless template of class `class`.
///
/// A low-frequency cosine grating around mid-gray whose spatial frequency
/// and phase are keyed by the class index, with a per-channel phase shift.
pub fn class_template(class: usize, num_classes: usize, shape: Shape, amplitude: f64) -> Vec<f64> {
    use std::f64::consts::TAU;
    let fx = (1 + class % 2) as f64;
    let fy = (1 + (class / 2) % 2) as f64;
    let phase = TAU * class as f64 / num_classes as f64;
    let (h, w) = (shape.height as f64, shape.width as f64);
    let mut out = Vec::with_capacity(shape.len());
    for ch in 0..shape.channels {
        let ch_phase = TAU * ch as f64 / 3.0;
        for y in 0..shape.height {
            for x in 0..shape.width {
                let arg = TAU * (fx * x as f64 / w + fy * y as f64 / h) + phase + ch_phase;
                out.push(0.5 + amplitude * arg.cos());
            }
        }
    }
    out
}

/// Draws `images_per_class` noisy copies of each class template.
///
/// Image `i` belongs to class `i % num_classes`.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<ImageDataset> {
    let s = spec.shape;
    if !matches!(s.height, 8 | 16 | 32) || !matches!(s.width, 8 | 16 | 32) {
        return Err(Error::InvalidShape(format!(
            "synthetic images must be 8, 16 or 32 pixels per side, got {}x{}",
            s.height, s.width
        )));
    }
    if s.channels != 1 && s.channels != 3 {
        return Err(Error::InvalidShape(format!("{} channels", s.channels)));
    }
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if !(spec.noise_sd >= 0.0) || !spec.class_separation.is_finite() {
        return Err(Error::InvalidArgument(
            "noise and separation must be finite, noise ≥ 0".into(),
        ));
    }

    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| class_template(c, spec.num_classes, s, spec.class_separation))
        .collect();
    let noise =
        Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let total = spec.num_classes * spec.images_per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.num_classes;
        let pixels: Vec<f64> = templates[class]
            .iter()
            .map(|t| {
                if spec.noise_sd > 0.0 {
                    t + noise.sample(&mut rng)
                } else {
                    *t
                }
            })
            .collect();
        images.push(Image::clamped(s, pixels)?);
        labels.push(class);
    }
    ImageDataset::new(images, labels, spec.num_classes)
}

/// Random split into two disjoint datasets of sizes `first` and the rest.
pub fn split(ds: &ImageDataset, first: usize, seed: u64) -> (ImageDataset, ImageDataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seeded_rng(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let first = first.min(idx.len());
    (ds.subset(&idx[..first]), ds.subset(&idx[first..]))
}

/// Writes the UAPD binary format (little-endian throughout):
/// `"UAPD"`, `u16` version, `u32` count/channels/height/width/num_classes,
/// `count` `u16` labels, then every pixel as `f32`.
pub fn save_dataset(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &ImageDataset, w: &mut impl Write) -> Result<()> {
    let shape = ds.shape().unwrap_or(Shape::new(1, 0, 0));
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (v, what) in [
        (ds.len(), "count"),
        (shape.channels, "channels"),
        (shape.height, "height"),
        (shape.width, "width"),
        (ds.num_classes(), "num_classes"),
    ] {
        w.write_all(&as_u32(v, what)?.to_le_bytes())?;
    }
    for &label in ds.labels() {
        let l = u16::try_from(label)
            .map_err(|_| Error::InvalidArgument(format!("label {label} exceeds u16")))?;
        w.write_all(&l.to_le_bytes())?;
    }
    for img in ds.images() {
        for &p in img.pixels() {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::CorruptHeader(format!("truncated while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

pub fn read_dataset(r: &mut impl Read) -> Result<ImageDataset> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    read_exact_or(r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported version {version}"
        )));
    }
    let mut fields = [0usize; 5];
    for (f, name) in fields
        .iter_mut()
        .zip(["count", "channels", "height", "width", "num_classes"])
    {
        let mut b4 = [0u8; 4];
        read_exact_or(r, &mut b4, name)?;
        *f = u32::from_le_bytes(b4) as usize;
    }
    let [count, channels, height, width, num_classes] = fields;
    let shape = Shape::new(channels, height, width);
    if count > 0 && channels != 1 && channels != 3 {
        return Err(Error::CorruptHeader(format!("{channels} channels")));
    }

    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact_or(r, &mut b2, "labels")?;
        labels.push(u16::from_le_bytes(b2) as usize);
    }
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; shape.len() * 4];
    for _ in 0..count {
        read_exact_or(r, &mut buf, "pixels")?;
        let pixels = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        images.push(
            Image::new(shape, pixels)
                .map_err(|e| Error::CorruptHeader(format!("bad pixel data: {e}")))?,
        );
    }
    ImageDataset::new(images, labels, num_classes).map_err(|e| Error::CorruptHeader(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(sep: f64, sd: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            images_per_class: 4,
            shape: Shape::new(3, 8, 8),
            class_separation: sep,
            noise_sd: sd,
        }
    }

    #[test]
    fn zero_noise_reproduces_templates() {
        let ds = make_synthetic(&small_spec(0.3, 0.0), 1).unwrap();
        for (img, label) in ds.iter() {
            let t = class_template(label, 3, img.shape(), 0.3);
            assert_eq!(img.pixels(), &t[..]);
        }
    }

    #[test]
    fn zero_separation_collapses_classes() {
        let ds = make_synthetic(&small_spec(0.0, 0.0), 1).unwrap();
        let first = ds.images()[0].pixels();
        assert!(ds.images().iter().all(|im| im.pixels() == first));
    }

    #[test]
    fn synthetic_rejects_bad_shapes() {
        let mut spec = small_spec(0.3, 0.05);
        spec.shape = Shape::new(3, 12, 12);
        assert!(matches!(
            make_synthetic(&spec, 0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(&small_spec(0.3, 0.05), 9).unwrap();
        let b = make_synthetic(&small_spec(0.3, 0.05), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grayscale_examples() {
        let s = Shape::new(3, 2, 2);
        let gray_in = Image::new(s, vec![0.4; 12]).unwrap();
        let g = grayscale(&gray_in);
        assert!(g.pixels().iter().all(|p| (p - 0.4).abs() < 1e-15));

        let mut red = vec![0.0; 12];
        red[..4].fill(1.0);
        let g = grayscale(&Image::new(s, red).unwrap());
        assert!(g.pixels().iter().all(|p| (p - 0.299).abs() < 1e-15));

        let g = grayscale(&Image::new(s, vec![0.0; 12]).unwrap());
        assert!(g.pixels().iter().all(|&p| p == 0.0));

        let single = Image::new(Shape::new(1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(grayscale(&single), single);
    }

    #[test]
    fn tile_block_order() {
        let pixels: Vec<f64> = (0..16).map(|v| v as f64 / 15.0).collect();
        let img = Image::new(Shape::new(1, 4, 4), pixels).unwrap();
        let layout = TileLayout::new(4, 4, 2).unwrap();
        let tiles = tile(&img, &layout).unwrap();
        let expected = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]];
        for (t, e) in tiles.iter().zip(expected) {
            let idx: Vec<i32> = t.iter().map(|v| (v * 15.0).round() as i32).collect();
            assert_eq!(idx, e);
        }
    }

    #[test]
    fn tile_single_and_constant() {
        let img = Image::new(
            Shape::new(1, 4, 4),
            (0..16).map(|v| v as f64 / 16.0).collect(),
        )
        .unwrap();
        let one = tile(&img, &TileLayout::new(4, 4, 4).unwrap()).unwrap();
        assert_eq!(one, vec![img.pixels().to_vec()]);

        let c = Image::new(Shape::new(1, 8, 8), vec![0.25; 64]).unwrap();
        let tiles = tile(&c, &TileLayout::new(8, 8, 4).unwrap()).unwrap();
        assert!(tiles.iter().all(|t| t == &tiles[0]));
    }

    #[test]
    fn tile_layout_validation() {
        assert!(TileLayout::new(16, 16, 3).is_err());
        assert!(TileLayout::new(16, 16, 0).is_err());
        let l = TileLayout::new(16, 16, 8).unwrap();
        assert_eq!((l.tiles_per_image(), l.tile_dim()), (4, 64));
        assert_eq!(TileLayout::default_for(8, 8).unwrap().tile_size(), 4);
        assert_eq!(TileLayout::default_for(32, 32).unwrap().tile_size(), 8);

        let img = Image::new(Shape::new(3, 16, 16), vec![0.0; 768]).unwrap();
        assert!(matches!(tile(&img, &l), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn clip_examples() {
        let img = Image::new(Shape::new(1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(clip_image(&img), img);
        let raw = Image {
            shape: Shape::new(1, 1, 2),
            pixels: vec![1.3, -0.2],
        };
        assert_eq!(clip_image(&raw).pixels(), &[1.0, 0.0]);
    }

    #[test]
    fn dataset_file_errors() {
        let ds = make_synthetic(&small_spec(0.3, 0.05), 2).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"UAPD");
        assert_eq!(bytes.len(), 4 + 2 + 20 + 2 * 12 + 4 * 12 * 192);

        let truncated = &bytes[..10];
        assert!(matches!(
            read_dataset(&mut &truncated[..]),
            Err(Error::CorruptHeader(_))
        ));
        let short_body = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_dataset(&mut &short_body[..]),
            Err(Error::CorruptHeader(_))
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset(&mut &bad[..]),
            Err(Error::BadMagic(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn save_load_round_trip(seed in any::<u64>(), sd in 0.0f64..0.2) {
                let ds = make_synthetic(&small_spec(0.3, sd), seed).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("ds.uapd");
                save_dataset(&ds, &path).unwrap();
                let back = load_dataset(&path).unwrap();
                prop_assert_eq!(back.labels(), ds.labels());
                prop_assert_eq!(back.num_classes(), ds.num_classes());
                for (a, b) in back.images().iter().zip(ds.images()) {
                    prop_assert_eq!(a.shape(), b.shape());
                    for (x, y) in a.pixels().iter().zip(b.pixels()) {
                        prop_assert!((x - y).abs() <= 1e-7);
                    }
                }
            }

            #[test]
            fn untile_inverts_tile(p_log in 0u32..4, seed in any::<u64>()) {
                let p = 1usize << p_log;
                let layout = TileLayout::new(16, 16, p).unwrap();
                let mut rng = seeded_rng(seed);
                let plane: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
                let tiles = tile_values(&plane, &layout).unwrap();
                prop_assert_eq!(untile(&tiles, &layout).unwrap(), plane);
            }

            #[test]
            fn grayscale_is_convex(seed in any::<u64>()) {
                let mut rng = seeded_rng(seed);
                let s = Shape::new(3, 4, 4);
                let img = Image::new(s, (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
                let g = grayscale(&img);
                let px = img.pixels();
                for (i, y) in g.pixels().iter().enumerate() {
                    let ch = [px[i], px[16 + i], px[32 + i]];
                    let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*y >= lo - 1e-15 && *y <= hi + 1e-15);
                }
            }
        }
    }
}
