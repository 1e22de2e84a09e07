//! Monochrome images: histogram equalization and fisheye-to-pinhole crop
//! resampling.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::crop::VirtualCamera;

/// Magic prefix of the raw intermediate image container.
pub const RAW_MAGIC: &[u8; 8] = b"HRGRAY01";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is empty")]
    EmptyImage,
    #[error("buffer of {len} bytes does not match {width}x{height}")]
    SizeMismatch { width: u32, height: u32, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: String, message: String },
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width as usize * height as usize {
            return Err(ImageError::SizeMismatch { width, height, len: data.len() });
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    /// Bilinear sample with pixel centers at integer coordinates. Positions
    /// outside the pixel area return `None`; neighbors past the border are
    /// clamped.
    pub fn sample_bilinear(&self, pos: &Vector2<f64>) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(pos.x >= -0.5 && pos.y >= -0.5 && pos.x < w - 0.5 && pos.y < h - 0.5) {
            return None;
        }
        let x = pos.x.clamp(0.0, w - 1.0);
        let y = pos.y.clamp(0.0, h - 1.0);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as u32;
        let y0 = y0 as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p = |xx, yy| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let luma = img.into_luma8();
        let (width, height) = luma.dimensions();
        GrayImage::new(width, height, luma.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImageError::Decode {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    /// Writes the raw container: magic, little-endian u32 width and height,
    /// then the pixel bytes.
    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(RAW_MAGIC)?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&self.data)
    }

    pub fn read_raw<R: Read>(mut r: R, path: &str) -> Result<Self, ImageError> {
        let io = |source| ImageError::Io { path: path.to_string(), source };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != RAW_MAGIC {
            return Err(ImageError::Decode {
                path: path.to_string(),
                message: "bad magic".into(),
            });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let width = u32::from_le_bytes(word);
        r.read_exact(&mut word).map_err(io)?;
        let height = u32::from_le_bytes(word);
        let mut data = vec![0u8; width as usize * height as usize];
        r.read_exact(&mut data).map_err(io)?;
        GrayImage::new(width, height, data)
    }
}

/// Global histogram equalization:
/// `out(v) = round(255 (cdf(v) - cdf_min) / (N - cdf_min))`.
///
/// A single-valued image has `N == cdf_min`; it is returned unchanged.
pub fn equalize_histogram(img: &GrayImage) -> Result<GrayImage, ImageError> {
    let n = img.data.len();
    if n == 0 {
        return Err(ImageError::EmptyImage);
    }
    let mut hist = [0usize; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist.iter()) {
        acc += h;
        *c = acc;
    }
    let cdf_min = *cdf.iter().find(|&&c| c > 0).expect("non-empty image");
    if cdf_min == n {
        return Ok(img.clone());
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let num = cdf[v].saturating_sub(cdf_min) as f64;
        *out = (255.0 * num / denom).round() as u8;
    }
    let data = img.data.iter().map(|&v| lut[v as usize]).collect();
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Renders the virtual pinhole view of `virt` from the physical image `src`.
///
/// Each output pixel is unprojected through the virtual pinhole, rotated into
/// the physical camera frame, projected through `src_cam` and bilinearly
/// sampled. Rays that miss the source field of view or image produce 0.
pub fn resample_crop(src: &GrayImage, src_cam: &Intrinsics, virt: &VirtualCamera) -> GrayImage {
    let intr = virt.intrinsics();
    let (w, h) = (intr.width(), intr.height());
    let rot = virt.rotation();
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            let pixel = Vector2::new(x as f64, y as f64);
            let value = intr
                .unproject(&pixel)
                .ok()
                .map(|ray| rot * ray)
                .and_then(|ray| src_cam.project(&ray).ok())
                .and_then(|p| src.sample_bilinear(&p))
                .map_or(0, |v| v.round().clamp(0.0, 255.0) as u8);
            data.push(value);
        }
    }
    GrayImage { width: w, height: h, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crop::{make_virtual_camera, CropConfig};
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn img(w: u32, h: u32, data: &[u8]) -> GrayImage {
        GrayImage::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = equalize_histogram(&GrayImage::filled(5, 3, 7)).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn extremes_preserved() {
        let out = equalize_histogram(&img(2, 1, &[0, 255])).unwrap();
        assert_eq!(out.data(), &[0, 255]);
    }

    #[test]
    fn two_level_image() {
        // cdf(10) = 2 = cdf_min, cdf(20) = 4 = N, so 20 maps to 255.
        let out = equalize_histogram(&img(2, 2, &[10, 10, 20, 20])).unwrap();
        assert_eq!(out.data(), &[0, 0, 255, 255]);
    }

    #[test]
    fn four_level_ramp_matches_hand_evaluation() {
        // cdf = 1, 2, 3, 4; cdf_min = 1; out = 255 * (c - 1) / 3.
        let out = equalize_histogram(&img(4, 1, &[3, 9, 40, 41])).unwrap();
        assert_eq!(out.data(), &[0, 85, 170, 255]);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(
            equalize_histogram(&img(0, 0, &[])),
            Err(ImageError::EmptyImage)
        ));
    }

    proptest! {
        #[test]
        fn equalization_is_monotone(data in prop::collection::vec(any::<u8>(), 1..400)) {
            let n = data.len() as u32;
            let src = img(n, 1, &data);
            let out = equalize_histogram(&src).unwrap();
            for i in 0..data.len() {
                for j in 0..data.len() {
                    if data[i] <= data[j] {
                        prop_assert!(out.data()[i] <= out.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn equalization_idempotent_on_spread_images(data in prop::collection::vec(any::<u8>(), 2..400)) {
            let once = equalize_histogram(&img(data.len() as u32, 1, &data)).unwrap();
            let twice = equalize_histogram(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn raw_round_trip() {
        let src = img(3, 2, &[1, 2, 3, 4, 5, 6]);
        let mut buf = Vec::new();
        src.write_raw(&mut buf).unwrap();
        assert_eq!(&buf[..8], RAW_MAGIC);
        assert_eq!(GrayImage::read_raw(&buf[..], "mem").unwrap(), src);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let src = img(4, 2, &[0, 10, 20, 30, 40, 50, 60, 255]);
        src.save_png(&path).unwrap();
        assert_eq!(GrayImage::load_png(&path).unwrap(), src);
    }

    fn centered_virtual(fx: f64) -> VirtualCamera {
        VirtualCamera::new(UnitQuaternion::identity(), fx, 256, "src".into()).unwrap()
    }

    #[test]
    fn identity_resample_of_matching_pinhole() {
        let virt = centered_virtual(180.0);
        let src_cam = virt.intrinsics().clone();
        let data: Vec<u8> = (0..256u32 * 256)
            .map(|i| ((i % 256) ^ (i / 256)) as u8)
            .collect();
        let src = img(256, 256, &data);
        let out = resample_crop(&src, &src_cam, &virt);
        for (a, b) in out.data().iter().zip(src.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn constant_source_gives_constant_in_fov() {
        let fisheye = Intrinsics::fisheye(150.0, 150.0, 199.5, 149.5, [0.0; 4], 400, 300).unwrap();
        let src = GrayImage::filled(400, 300, 93);
        let pixels = vec![Vector2::new(330.0, 140.0), Vector2::new(360.0, 170.0)];
        let virt = make_virtual_camera(&pixels, &fisheye, "c".into(), &CropConfig::default()).unwrap();
        let out = resample_crop(&src, &fisheye, &virt);
        let intr = virt.intrinsics();
        for y in 0..256 {
            for x in 0..256 {
                let ray = virt.rotation() * intr.unproject(&Vector2::new(x as f64, y as f64)).unwrap();
                let hit = fisheye.project(&ray).ok().filter(|p| fisheye.contains(p));
                let v = out.get(x, y);
                if hit.is_some() {
                    assert_eq!(v, 93);
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn bright_point_lands_at_virtual_projection() {
        let fisheye = Intrinsics::fisheye(
            300.0, 310.0, 319.5, 239.5, [0.02, -0.005, 0.0008, 0.0], 640, 480,
        )
        .unwrap();
        let point = Vector3::new(0.25, -0.1, 0.5);
        let px = fisheye.project(&point).unwrap();
        let mut src = GrayImage::filled(640, 480, 0);
        src.set(px.x.round() as u32, px.y.round() as u32, 255);
        // Frame the point together with a nearby cluster.
        let cluster: Vec<_> = [(-0.03, 0.0), (0.03, 0.02), (0.0, -0.03)]
            .iter()
            .map(|(dx, dy)| fisheye.project(&(point + Vector3::new(*dx, *dy, 0.0))).unwrap())
            .collect();
        let virt = make_virtual_camera(&cluster, &fisheye, "c".into(), &CropConfig::default()).unwrap();
        let out = resample_crop(&src, &fisheye, &virt);
        let (mut best, mut at) = (0u8, (0u32, 0u32));
        for y in 0..256 {
            for x in 0..256 {
                if out.get(x, y) > best {
                    best = out.get(x, y);
                    at = (x, y);
                }
            }
        }
        // The lit pixel sits at the rounded source position; account for that offset.
        let lit = Vector2::new(px.x.round(), px.y.round());
        let lit_ray = fisheye.unproject(&lit).unwrap();
        let expected = virt.project_camera_ray(&lit_ray).unwrap();
        let found = Vector2::new(at.0 as f64, at.1 as f64);
        assert!(best > 0);
        assert!((found - expected).norm() <= 1.0, "found {found:?}, expected {expected:?}");
    }

    #[test]
    fn resample_is_deterministic() {
        let fisheye = Intrinsics::fisheye(150.0, 150.0, 199.5, 149.5, [0.0; 4], 400, 300).unwrap();
        let data: Vec<u8> = (0..400u32 * 300).map(|i| (i * 7 % 251) as u8).collect();
        let src = img(400, 300, &data);
        let pixels = vec![Vector2::new(200.0, 100.0), Vector2::new(260.0, 150.0)];
        let virt = make_virtual_camera(&pixels, &fisheye, "c".into(), &CropConfig::default()).unwrap();
        assert_eq!(resample_crop(&src, &fisheye, &virt), resample_crop(&src, &fisheye, &virt));
    }
}
