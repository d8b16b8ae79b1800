//! PNG ⇄ tensor conversion. Tensors are `C × H × W` (or batched) f32 with
//! values in [-1, 1].

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rayon::prelude::*;

use crate::error::{Error, IoContext, Result};

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let hw = (w * h) as usize;
    let mut data = vec![0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), &Device::Cpu)?)
}

/// Loads images into one `(B, 3, H, W)` batch. Every unreadable file is
/// listed in the error, not just the first.
pub fn load_batch(paths: &[PathBuf]) -> Result<Tensor> {
    let loaded: Vec<Result<Tensor>> = paths.par_iter().map(|p| load_rgb(p)).collect();
    let mut ok = Vec::with_capacity(loaded.len());
    let mut bad = Vec::new();
    for (p, r) in paths.iter().zip(loaded) {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => bad.push(format!("{} ({e})", p.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Image {
            path: paths.first().cloned().unwrap_or_default(),
            message: format!("{} unreadable image(s): {}", bad.len(), bad.join("; ")),
        });
    }
    Ok(Tensor::stack(&ok, 0)?)
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let hw = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(data[i]), to_u8(data[hw + i]), to_u8(data[2 * hw + i])])
    }))
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    tensor_to_image(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// PNG files in `dir` (not recursive), sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4 % 256) as f32 / 127.5 - 1.0).collect();
        let t = Tensor::from_vec(vals.clone(), (3, 4, 5), &Device::Cpu).unwrap();
        let p = dir.path().join("a/b.png");
        save_rgb(&t, &p).unwrap();
        let back = load_rgb(&p).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(list_pngs(&dir.path().join("a")).unwrap(), vec![p]);
    }

    #[test]
    fn batch_errors_name_every_bad_file() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        RgbImage::new(2, 2).save(&good).unwrap();
        let bad1 = dir.path().join("bad1.png");
        let bad2 = dir.path().join("bad2.png");
        std::fs::write(&bad1, b"x").unwrap();
        std::fs::write(&bad2, b"y").unwrap();
        let err = load_batch(&[good, bad1, bad2]).unwrap_err().to_string();
        assert!(err.contains("bad1.png") && err.contains("bad2.png"), "{err}");
    }
}
