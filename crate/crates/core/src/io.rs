//! Raw little-endian float32 arrays with JSON sidecars, and 8-bit PNG export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::patterns::{LightPattern, MaskPattern, PatternPair};
use crate::render::Image;

/// Header stored next to every raw array as `<stem>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// Row-major dimensions, outermost first, excluding channels.
    pub shape: Vec<usize>,
    pub channels: usize,
    pub kind: String,
}

impl Sidecar {
    pub fn len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Byte offset of a serde_json error inside `text`.
pub(crate) fn json_error_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line = e.line().max(1);
    let before: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (before + e.column().saturating_sub(1)) as u64
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        offset: json_error_offset(&text, &e),
        msg: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads exactly `expected` values; any other payload size is a parse error
/// located at the first byte that disagrees with the expectation.
pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let want = expected * 4;
    if bytes.len() != want {
        return Err(Error::Parse {
            path: path.to_owned(),
            offset: bytes.len().min(want) as u64,
            msg: format!("expected {want} bytes of float32 data, found {}", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<stem>.f32` and `<stem>.json`.
pub fn write_array(stem: &Path, header: &Sidecar, data: &[f32]) -> Result<()> {
    if header.len() != data.len() {
        return Err(Error::Domain(format!(
            "header describes {} values but {} given",
            header.len(),
            data.len()
        )));
    }
    write_json(&with_ext(stem, "json"), header)?;
    write_f32(&with_ext(stem, "f32"), data)
}

pub fn read_array(stem: &Path) -> Result<(Sidecar, Vec<f32>)> {
    let header: Sidecar = read_json(&with_ext(stem, "json"))?;
    let data = read_f32(&with_ext(stem, "f32"), header.len())?;
    Ok((header, data))
}

pub fn save_image(stem: &Path, img: &Image) -> Result<()> {
    let header = Sidecar {
        shape: vec![img.height, img.width],
        channels: img.channels,
        kind: "image".into(),
    };
    write_array(stem, &header, &img.data)
}

pub fn load_image(stem: &Path) -> Result<Image> {
    let (h, data) = read_array(stem)?;
    if h.kind != "image" || h.shape.len() != 2 {
        return Err(Error::Parse {
            path: with_ext(stem, "json"),
            offset: 0,
            msg: format!("expected a 2-D image header, found kind {:?} shape {:?}", h.kind, h.shape),
        });
    }
    Ok(Image {
        width: h.shape[1],
        height: h.shape[0],
        channels: h.channels,
        data,
    })
}

/// Stores a pattern pair as `<stem>_light` and `<stem>_mask` arrays. Values
/// are stored at `f32` precision.
pub fn save_pattern(stem: &Path, pair: &PatternPair) -> Result<()> {
    let name = stem.file_name().and_then(|s| s.to_str()).unwrap_or("pattern");
    let dir = stem.parent().unwrap_or(Path::new("."));
    let light = Sidecar {
        shape: vec![pair.light.rows, pair.light.cols],
        channels: pair.light.channels,
        kind: "light".into(),
    };
    let to32 = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<_>>();
    write_array(&dir.join(format!("{name}_light")), &light, &to32(&pair.light.values))?;
    let mask = Sidecar {
        shape: vec![pair.mask.height, pair.mask.width],
        channels: 1,
        kind: "mask".into(),
    };
    write_array(&dir.join(format!("{name}_mask")), &mask, &to32(&pair.mask.values))
}

pub fn load_pattern(stem: &Path) -> Result<PatternPair> {
    let name = stem.file_name().and_then(|s| s.to_str()).unwrap_or("pattern");
    let dir = stem.parent().unwrap_or(Path::new("."));
    let (lh, light) = read_array(&dir.join(format!("{name}_light")))?;
    let (mh, mask) = read_array(&dir.join(format!("{name}_mask")))?;
    let bad = |h: &Sidecar, kind: &str, path: PathBuf| {
        (h.kind != kind || h.shape.len() != 2).then(|| Error::Parse {
            path,
            offset: 0,
            msg: format!("expected a 2-D {kind} header"),
        })
    };
    if let Some(e) = bad(&lh, "light", dir.join(format!("{name}_light.json"))) {
        return Err(e);
    }
    if let Some(e) = bad(&mh, "mask", dir.join(format!("{name}_mask.json"))) {
        return Err(e);
    }
    let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
    Ok(PatternPair {
        light: LightPattern {
            rows: lh.shape[0],
            cols: lh.shape[1],
            channels: lh.channels,
            values: to64(light),
        },
        mask: MaskPattern {
            width: mh.shape[1],
            height: mh.shape[0],
            values: to64(mask),
        },
    })
}

/// 8-bit grayscale PNG of a scalar field, mapping `[lo, hi]` to `[0, 255]`.
pub fn write_png_gray(path: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Image(format!("{} values for a {width}x{height} image", values.len())))?;
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// PNG of an image scaled by its maximum; three-channel images stay RGB,
/// others are averaged to gray.
pub fn write_png_image(path: &Path, img: &Image) -> Result<()> {
    let peak = img.max_value().max(f32::MIN_POSITIVE);
    let px = |v: f32| ((v / peak).clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = if img.channels == 3 {
        let bytes = img.data.iter().map(|v| px(*v)).collect();
        image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).map(|i| i.save(path))
    } else {
        let bytes = (0..img.width * img.height)
            .map(|i| px(img.pixel(i).iter().sum::<f32>() / img.channels as f32))
            .collect();
        image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes).map(|i| i.save(path))
    };
    match res {
        Some(r) => r.map_err(|e| Error::Image(format!("{}: {e}", path.display()))),
        None => Err(Error::Image("image buffer size mismatch".into())),
    }
}

/// PNG previews of a pattern pair: the mask, and the LED array scaled up so
/// each LED is a visible square.
pub fn write_pattern_pngs(stem: &Path, pair: &PatternPair) -> Result<()> {
    let name = stem.file_name().and_then(|s| s.to_str()).unwrap_or("pattern");
    let dir = stem.parent().unwrap_or(Path::new("."));
    let m = &pair.mask;
    write_png_gray(&dir.join(format!("{name}_mask.png")), m.width, m.height, &m.values, 0.0, 1.0)?;
    let l = &pair.light;
    let cell = 8;
    let (w, h) = (l.cols * cell, l.rows * cell);
    let c_n = l.channels;
    let big = Image {
        width: w,
        height: h,
        channels: if c_n == 3 { 3 } else { 1 },
        data: (0..w * h)
            .flat_map(|i| {
                let led = (i / w / cell) * l.cols + (i % w) / cell;
                let vals = &l.values[led * c_n..(led + 1) * c_n];
                if c_n == 3 {
                    vals.iter().map(|v| *v as f32).collect::<Vec<_>>()
                } else {
                    vec![(vals.iter().sum::<f64>() / c_n as f64) as f32]
                }
            })
            .collect(),
    };
    // fixed [0,1] range rather than max-normalized
    let bytes: Vec<u8> = big.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let path = dir.join(format!("{name}_light.png"));
    let res = if big.channels == 3 {
        image::RgbImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(&path))
    } else {
        image::GrayImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(&path))
    };
    match res {
        Some(r) => r.map_err(|e| Error::Image(format!("{}: {e}", path.display()))),
        None => Err(Error::Image("image buffer size mismatch".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::PatternShape;

    #[test]
    fn raw_array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("a");
        let header = Sidecar {
            shape: vec![2, 3],
            channels: 2,
            kind: "image".into(),
        };
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.0).collect();
        write_array(&stem, &header, &data).unwrap();
        let (h, back) = read_array(&stem).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, data);
    }

    #[test]
    fn short_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        write_f32(&p, &[1.0, 2.0]).unwrap();
        match read_f32(&p, 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_offset_points_into_the_text() {
        let text = "{\n  \"a\": 1,\n  \"b\": ]\n}";
        let e = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        let off = json_error_offset(text, &e) as usize;
        assert_eq!(&text[off..off + 1], "]");
    }

    #[test]
    fn pattern_round_trip_at_display_precision() {
        let dir = tempfile::tempdir().unwrap();
        let shape = PatternShape {
            led_rows: 2,
            led_cols: 3,
            channels: 3,
            mask_w: 5,
            mask_h: 4,
        };
        let mut pair = PatternPair::filled(&shape, 0.0, 0.0);
        pair.light.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 17.0);
        pair.mask.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.1).sin().abs());
        let pair = pair.to_display_precision();
        let stem = dir.path().join("p000");
        save_pattern(&stem, &pair).unwrap();
        write_pattern_pngs(&stem, &pair).unwrap();
        assert_eq!(load_pattern(&stem).unwrap(), pair);
        assert!(dir.path().join("p000_mask.png").exists());
        assert!(dir.path().join("p000_light.png").exists());
    }
}
