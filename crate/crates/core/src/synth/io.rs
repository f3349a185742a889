use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::SynthConfig;
use crate::model::{HybridDataset, ImageGrid, Instance, Mask, Supervision};
use crate::{Error, Result};

const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: HybridDataset,
    /// `config.*` entries of the manifest, prefix stripped, in file order.
    pub config: Vec<(String, String)>,
}

impl SynthConfig {
    /// Key/value echo used in dataset manifests and run directories.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let k = &self.knobs;
        vec![
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("classes", self.classes.to_string()),
            ("n_strong", self.n_strong.to_string()),
            ("n_weak", self.n_weak.to_string()),
            ("shape", self.shape.as_str().to_string()),
            ("radius_min", self.radius_min.to_string()),
            ("radius_max", self.radius_max.to_string()),
            ("contrast", self.contrast.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("scale_jitter", k.scale_jitter.to_string()),
            ("offset_jitter", k.offset_jitter.to_string()),
            ("rotation_jitter", k.rotation_jitter.to_string()),
            ("p_drop", k.p_drop.to_string()),
            ("p_blur", k.p_blur.to_string()),
            ("p_flip", k.p_flip.to_string()),
            ("corruption_tolerance", self.corruption_tolerance.to_string()),
        ]
    }
}

fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let mut s = String::new();
    let row = image.width() * image.channels();
    for line in image.data().chunks(row) {
        let cells: Vec<String> = line.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut s = String::new();
    for line in mask.labels().chunks(mask.width()) {
        let cells: Vec<String> = line.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_values<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<T>().map_err(|_| {
                Error::InvalidArgument(format!("{}: cannot parse value {tok:?}", path.display()))
            })
        })
        .collect()
}

/// Writes `manifest.txt` plus one text file per image and mask.
pub fn save_dataset(dataset: &HybridDataset, config: &SynthConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = String::new();
    writeln!(m, "version = 1").unwrap();
    writeln!(m, "height = {}", config.height).unwrap();
    writeln!(m, "width = {}", config.width).unwrap();
    writeln!(m, "channels = {}", config.channels).unwrap();
    writeln!(m, "classes = {}", config.classes).unwrap();
    for (k, v) in config.to_pairs() {
        writeln!(m, "config.{k} = {v}").unwrap();
    }
    for inst in dataset.iter() {
        let kind = match inst.supervision {
            Supervision::Strong => "strong",
            Supervision::Weak => "weak",
        };
        writeln!(
            m,
            "instance = {} {} {} {}",
            inst.id,
            kind,
            inst.corrupted as u8,
            inst.clean_mask.is_some() as u8
        )
        .unwrap();
        write_image(&dir.join(format!("image_{}.txt", inst.id)), &inst.image)?;
        write_mask(&dir.join(format!("mask_{}.txt", inst.id)), &inst.mask)?;
        if let Some(clean) = &inst.clean_mask {
            write_mask(&dir.join(format!("clean_{}.txt", inst.id)), clean)?;
        }
    }
    fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut dims = [None::<usize>; 4];
    let mut config = Vec::new();
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |key: &str, reason: &str| Error::Parse {
            line: n + 1,
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| parse_err("", "expected key = value"))?;
        let slot = match key {
            "height" => Some(0),
            "width" => Some(1),
            "channels" => Some(2),
            "classes" => Some(3),
            _ => None,
        };
        if let Some(i) = slot {
            dims[i] = Some(value.parse().map_err(|_| parse_err(key, "not an integer"))?);
        } else if let Some(k) = key.strip_prefix("config.") {
            config.push((k.to_string(), value.to_string()));
        } else if key == "instance" {
            let f: Vec<&str> = value.split_whitespace().collect();
            if f.len() != 4 {
                return Err(parse_err(key, "expected: id kind corrupted has_clean"));
            }
            let id: usize = f[0].parse().map_err(|_| parse_err(key, "bad id"))?;
            let sup = match f[1] {
                "strong" => Supervision::Strong,
                "weak" => Supervision::Weak,
                _ => return Err(parse_err(key, "kind must be strong or weak")),
            };
            entries.push((id, sup, f[2] == "1", f[3] == "1"));
        } else if key != "version" {
            return Err(parse_err(key, "unknown key"));
        }
    }
    let [Some(h), Some(w), Some(ch), Some(classes)] = dims else {
        return Err(Error::Config("manifest lacks height/width/channels/classes".into()));
    };

    let mut dataset = HybridDataset::default();
    for (id, supervision, corrupted, has_clean) in entries {
        let image = ImageGrid::new(h, w, ch, read_values(&dir.join(format!("image_{id}.txt")))?)?;
        let mask = Mask::new(h, w, classes, read_values(&dir.join(format!("mask_{id}.txt")))?)?;
        let clean_mask = if has_clean {
            Some(Mask::new(h, w, classes, read_values(&dir.join(format!("clean_{id}.txt")))?)?)
        } else {
            None
        };
        let inst = Instance {
            id,
            image,
            mask,
            supervision,
            corrupted,
            clean_mask,
        };
        inst.validate()?;
        match supervision {
            Supervision::Strong => dataset.strong.push(inst),
            Supervision::Weak => dataset.weak.push(inst),
        }
    }
    Ok(LoadedDataset { dataset, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let cfg = SynthConfig {
            n_strong: 2,
            n_weak: 4,
            channels: 2,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, &cfg, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.dataset, ds);
        assert!(loaded.config.iter().any(|(k, v)| k == "p_drop" && v == "0.4"));
    }
}
