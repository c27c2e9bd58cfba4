use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::LabelMap;
use crate::error::{Error, Result};

/// Reads an 8- or 16-bit single-channel PNG whose pixel values are class ids.
pub fn load_label_map(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let invalid = |reason: String| Error::InvalidLabelMap {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height, labels): (u32, u32, Vec<u32>) = match img {
        DynamicImage::ImageLuma8(buf) => (
            buf.width(),
            buf.height(),
            buf.into_raw().into_iter().map(u32::from).collect(),
        ),
        DynamicImage::ImageLuma16(buf) => (
            buf.width(),
            buf.height(),
            buf.into_raw().into_iter().map(u32::from).collect(),
        ),
        other => {
            return Err(invalid(format!(
                "expected a single-channel image, got {:?}",
                other.color()
            )))
        }
    };
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(invalid(format!(
            "pixel ({}, {}) has class {} but only {classes} classes exist",
            i as u32 % width,
            i as u32 / width,
            labels[i]
        )));
    }
    LabelMap::new(width, height, labels)
}

/// Writes a label map as 8-bit grayscale when every id fits, 16-bit otherwise.
pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = map.max_label().unwrap_or(0);
    let result = if max <= u32::from(u8::MAX) {
        let raw = map.labels.iter().map(|&l| l as u8).collect();
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(map.width, map.height, raw)
            .expect("label map length matches its dimensions")
            .save(path)
    } else if max <= u32::from(u16::MAX) {
        let raw = map.labels.iter().map(|&l| l as u16).collect();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(map.width, map.height, raw)
            .expect("label map length matches its dimensions")
            .save(path)
    } else {
        return Err(Error::InvalidLabelMap {
            path: path.to_path_buf(),
            reason: format!("class id {max} does not fit in 16 bits"),
        });
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn all_zero_png_is_background() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.png");
        ImageBuffer::<Luma<u8>, _>::new(5, 3).save(&path).unwrap();
        let map = load_label_map(&path, 2).unwrap();
        assert_eq!((map.width, map.height), (5, 3));
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn label_at_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut img = ImageBuffer::<Luma<u8>, _>::new(4, 4);
        img.put_pixel(2, 1, Luma([3]));
        img.save(&path).unwrap();
        assert!(load_label_map(&path, 4).is_ok());
        assert!(matches!(load_label_map(&path, 3), Err(Error::InvalidLabelMap { .. })));
    }

    #[test]
    fn rgb_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        RgbImage::from_pixel(2, 2, Rgb([0, 0, 0])).save(&path).unwrap();
        assert!(matches!(load_label_map(&path, 2), Err(Error::InvalidLabelMap { .. })));
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.png");
        let map = LabelMap::new(3, 1, vec![0, 300, 65535]).unwrap();
        save_label_map(&map, &path).unwrap();
        assert_eq!(load_label_map(&path, 65536).unwrap(), map);
    }
}
