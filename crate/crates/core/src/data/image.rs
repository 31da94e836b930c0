use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::binio::read_file;
use crate::error::{Error, Result};

/// Record layout of an image dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFormat {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    /// Label bytes per raw record, 1 or 2.
    #[serde(default = "one")]
    pub label_bytes: usize,
    /// Which label byte holds the class; defaults to the last one.
    #[serde(default)]
    pub label_index: Option<usize>,
}

fn one() -> usize {
    1
}

impl ImageFormat {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("data.image", "channels, height and width must be positive"));
        }
        if self.class_count == 0 {
            return Err(Error::config("data.image.class_count", "must be positive"));
        }
        if !(1..=2).contains(&self.label_bytes) {
            return Err(Error::config("data.image.label_bytes", "must be 1 or 2"));
        }
        if self.label_index.is_some_and(|i| i >= self.label_bytes) {
            return Err(Error::config("data.image.label_index", "must be below label_bytes"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn record_size(&self) -> usize {
        self.label_bytes + self.pixels()
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [("mean", &self.mean), ("std", &self.std)] {
            if !v.is_empty() && v.len() != channels {
                return Err(Error::config(
                    format!("data.normalization.{name}"),
                    format!("needs {channels} entries, got {}", v.len()),
                ));
            }
        }
        if !self.std.iter().all(|&s| s > 0.0) {
            return Err(Error::config("data.normalization.std", "entries must be positive"));
        }
        Ok(())
    }

    fn apply(&self, channel: usize, byte: u8) -> f64 {
        let x = f64::from(byte) / 255.0;
        let mean = self.mean.get(channel).copied().unwrap_or(0.0);
        let std = self.std.get(channel).copied().unwrap_or(1.0);
        (x - mean) / std
    }
}

fn push_chw(out: &mut Vec<f64>, chw: &[u8], format: &ImageFormat, norm: &Normalization) {
    let plane = format.height * format.width;
    out.extend(chw.iter().enumerate().map(|(i, &b)| norm.apply(i / plane, b)));
}

/// Records of label byte(s) followed by channel-major pixel bytes.
pub fn load_raw_binary(path: &Path, format: &ImageFormat, norm: &Normalization) -> Result<Dataset> {
    format.validate()?;
    norm.validate(format.channels)?;
    let bytes = read_file(path)?;
    let record = format.record_size();
    let complete = bytes.len() / record;
    if bytes.len() % record != 0 {
        return Err(Error::parse(
            path,
            (complete * record) as u64,
            format!(
                "truncated record: {} trailing bytes, records are {record} bytes",
                bytes.len() % record
            ),
        ));
    }
    let label_at = format.label_index.unwrap_or(format.label_bytes - 1);
    let mut labels = Vec::with_capacity(complete);
    let mut data = Vec::with_capacity(complete * format.pixels());
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_at] as usize;
        if label >= format.class_count {
            return Err(Error::parse(
                path,
                (i * record + label_at) as u64,
                format!("label {label} out of range for {} classes", format.class_count),
            ));
        }
        labels.push(label);
        push_chw(&mut data, &rec[format.label_bytes..], format, norm);
    }
    let features = if complete == 0 {
        Tensor::from_parts(vec![0, format.pixels()], Vec::new())
    } else {
        Tensor::new(vec![complete, format.pixels()], data)?
    };
    Dataset::new(features, labels, format.class_count, format.shape())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// `root/<class>/<image>.png`; classes are the sorted subdirectory names.
pub fn load_png_dir(root: &Path, format: &ImageFormat, norm: &Normalization) -> Result<Dataset> {
    format.validate()?;
    norm.validate(format.channels)?;
    if !matches!(format.channels, 1 | 3) {
        return Err(Error::config("data.image.channels", "PNG directories need 1 or 3 channels"));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.len() != format.class_count {
        return Err(Error::config(
            "data.image.class_count",
            format!("{} expects {} classes but has {} class directories", root.display(), format.class_count, classes.len()),
        ));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut chw = vec![0u8; format.pixels()];
    for (label, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let img = ::image::open(&file).map_err(|e| Error::parse(&file, 0, e.to_string()))?;
            if (img.width() as usize, img.height() as usize) != (format.width, format.height) {
                return Err(Error::parse(
                    &file,
                    0,
                    format!("image is {}x{}, expected {}x{}", img.width(), img.height(), format.width, format.height),
                ));
            }
            let hwc = if format.channels == 1 {
                img.to_luma8().into_raw()
            } else {
                img.to_rgb8().into_raw()
            };
            let plane = format.height * format.width;
            for (i, &b) in hwc.iter().enumerate() {
                chw[(i % format.channels) * plane + i / format.channels] = b;
            }
            push_chw(&mut data, &chw, format, norm);
            labels.push(label);
        }
    }
    let n = labels.len();
    let features = if n == 0 {
        Tensor::from_parts(vec![0, format.pixels()], Vec::new())
    } else {
        Tensor::new(vec![n, format.pixels()], data)?
    };
    Dataset::new(features, labels, format.class_count, format.shape())
}

/// Dispatches on a format tag: `raw-binary` or `png-dir`.
pub fn load_image_dataset(path: &Path, tag: &str, format: &ImageFormat, norm: &Normalization) -> Result<Dataset> {
    match tag {
        "raw-binary" => load_raw_binary(path, format, norm),
        "png-dir" => load_png_dir(path, format, norm),
        other => Err(Error::config(
            "data.format",
            format!("unknown image format `{other}`; expected raw-binary or png-dir"),
        )),
    }
}
