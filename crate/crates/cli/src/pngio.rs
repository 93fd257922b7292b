//! PNG bridging between on-disk 8-bit images and the in-memory float images
//! the pipeline works with. Floats are clamped to [0, 1] and quantized by
//! round-to-nearest; reads divide by 255, so an 8-bit file round-trips to
//! the same bytes.

use std::path::Path;

use anyhow::Context;
use patchfuse_core::geometry::RgbImage;

pub fn write_png(path: &Path, rgb: &RgbImage) -> anyhow::Result<()> {
    rgb.validate()?;
    let mut buf = image::RgbImage::new(rgb.width, rgb.height);
    for (i, pixel) in buf.pixels_mut().enumerate() {
        let [r, g, b] = rgb.values[i];
        *pixel = image::Rgb([quantize(r), quantize(g), quantize(b)]);
    }
    // Write-then-rename so a concurrent reader never sees a partial file.
    // The temp path keeps the .png extension because the encoder picks its
    // format from the file name.
    let mut tmp_name = path.file_name().unwrap_or_default().to_owned();
    tmp_name.push(".tmp.png");
    let tmp = path.with_file_name(tmp_name);
    buf.save(&tmp)
        .with_context(|| format!("encoding {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> anyhow::Result<RgbImage> {
    let img = image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let values = img
        .pixels()
        .map(|p| [f32::from(p.0[0]) / 255.0, f32::from(p.0[1]) / 255.0, f32::from(p.0[2]) / 255.0])
        .collect();
    Ok(RgbImage::new(img.width(), img.height(), values)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
