//! Dataset loaders, the synthetic planar world, and checkpoint files.

mod checkpoint;
pub(crate) mod kitti;
mod synth;
mod tum;

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, RawTensor, MAGIC};
pub use kitti::{
    format_kitti_poses, load_dataset, load_kitti_poses, load_kitti_sequence, parse_kitti_poses, sequence_dirs,
    write_kitti_poses, write_kitti_sequence,
};
pub use synth::{generate_synthetic, SyntheticWorldConfig};
pub use tum::{load_tum_trajectory, parse_tum_trajectory};

use crate::error::{Error, Result};
use crate::pose::Se3;
use crate::tensor::{Real, Tensor};

/// Frames plus the absolute world pose of each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<RgbImage>,
    pub poses: Vec<Se3>,
}

impl SequenceSample {
    pub fn new(frames: Vec<RgbImage>, poses: Vec<Se3>) -> Result<Self> {
        if frames.len() != poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} poses",
                frames.len(),
                poses.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::InvalidArgument("a sequence needs at least 2 frames".into()));
        }
        let dims = frames[0].dimensions();
        if let Some(f) = frames.iter().find(|f| f.dimensions() != dims) {
            return Err(Error::InvalidArgument(format!(
                "frame sizes differ: {:?} vs {:?}",
                dims,
                f.dimensions()
            )));
        }
        Ok(SequenceSample { frames, poses })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Every frame as a normalized `[3,H,W]` tensor.
    pub fn tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        self.frames.iter().map(image_to_tensor).collect()
    }
}

/// `[3,H,W]` tensor with values `v/255 - 0.5`.
pub fn image_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = T::of(px[c] as f64 / 255.0 - 0.5);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("extents match")
}

/// Bilinear resize when `img` is not already `width x height`.
pub fn fit_image(img: RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        img
    } else {
        imageops::resize(&img, width, height, FilterType::Triangle)
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_range() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(0, 0, image::Rgb([0, 255, 51]));
        let t: Tensor<f64> = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[0], -0.5);
        assert_eq!(t.data()[2], 0.5);
        assert!((t.data()[4] - (0.2 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sample_validation() {
        let f = RgbImage::new(4, 4);
        assert!(SequenceSample::new(vec![f.clone()], vec![Se3::identity()]).is_err());
        assert!(SequenceSample::new(vec![f.clone(), f.clone()], vec![Se3::identity()]).is_err());
        assert!(SequenceSample::new(vec![f.clone(), RgbImage::new(2, 2)], vec![Se3::identity(); 2]).is_err());
        assert_eq!(SequenceSample::new(vec![f.clone(), f], vec![Se3::identity(); 2]).unwrap().len(), 2);
    }

    #[test]
    fn resize_only_when_needed() {
        let img = RgbImage::from_pixel(8, 4, image::Rgb([10, 20, 30]));
        assert_eq!(fit_image(img.clone(), 8, 4), img);
        let r = fit_image(img, 4, 2);
        assert_eq!(r.dimensions(), (4, 2));
        assert_eq!(r.get_pixel(1, 1).0, [10, 20, 30]);
    }
}
