use image::RgbImage;

use super::{ModelError, Result};
use crate::imaging::PlanarImage;
use crate::tensor::Tensor;

/// Channel statistics of the ImageNet pretraining corpus, on the 0–1 scale.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(ModelError::EmptyImage);
    }
    Ok(img)
}

/// Bilinear resize to `resolution × resolution`, scale to [0, 1], standardize
/// per channel, and lay out as `(1, 3, resolution, resolution)`.
pub fn preprocess(image: &RgbImage, resolution: usize) -> Result<Tensor<f32>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(ModelError::EmptyImage);
    }
    let resized = PlanarImage::from_rgb(image).resize(resolution, resolution);
    let mut data = resized.data().to_vec();
    let plane = resolution * resolution;
    for c in 0..3 {
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = (*v / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Ok(Tensor::from_vec([1, 3, resolution, resolution], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_closed_form() {
        let img = RgbImage::from_pixel(50, 30, image::Rgb([128, 128, 128]));
        let t = preprocess(&img, 224).unwrap();
        assert_eq!(t.shape().dims(), [1, 3, 224, 224]);
        for c in 0..3 {
            let want = (128.0f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            let plane = &t.data()[c * 224 * 224..(c + 1) * 224 * 224];
            assert!(plane.iter().all(|&v| (v - want).abs() <= 1e-6), "channel {c}");
        }
    }

    #[test]
    fn native_resolution_is_not_resampled() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, (x * y) as u8]));
        let t = preprocess(&img, 8).unwrap();
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                let want = (f32::from(px[c]) / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                assert_eq!(t.data()[c * 64 + i], want);
            }
        }
    }

    #[test]
    fn photo_sized_input_maps_to_model_resolution() {
        let img = RgbImage::new(640, 480);
        assert_eq!(preprocess(&img, 224).unwrap().shape().dims(), [1, 3, 224, 224]);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(preprocess(&RgbImage::new(0, 5), 224), Err(ModelError::EmptyImage)));
    }
}
