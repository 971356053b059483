//! On-disk formats.
//!
//! Feature file (`*.sstn`): magic `SSTN`, version `u16`, frames `u32`,
//! dim `u32`, then `frames × dim` little-endian `f32` values in row-major
//! order. Label file: CSV with header `bag_id,obs_0..obs_{C-1}` optionally
//! followed by `true_0..true_{C-1}`.
//!
//! Dataset directory: `spec.json` (absent for external data) and one
//! directory per split holding `labels.csv`, `features/<bag_id>.sstn` and,
//! for generated data, `events.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::spec::DatasetSpec;
use crate::data::synth::Split;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mil::bag::{Bag, Event};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"SSTN";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (frames, dim) = (features.dim(0), features.dim(1));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * features.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: FEATURE_VERSION,
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, dim) = (u32_at(6), u32_at(10));
    let expected = HEADER_LEN + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![frames, dim], data).map_err(|_| Error::InvalidGeometry {
        op: "load_features",
        detail: format!("{}: empty feature matrix {frames}×{dim}", path.display()),
    })
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

/// One parsed row of a label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub bag_id: String,
    pub observed: Vec<bool>,
    pub truth: Option<Vec<bool>>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::LabelFormat {
        path: path.to_path_buf(),
        line,
        detail: e.to_string(),
    }
}

pub fn write_labels(path: &Path, bags: &[Bag], n_classes: usize) -> Result<()> {
    let with_truth = !bags.is_empty() && bags.iter().all(|b| b.true_labels.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["bag_id".to_string()];
    header.extend((0..n_classes).map(|c| format!("obs_{c}")));
    if with_truth {
        header.extend((0..n_classes).map(|c| format!("true_{c}")));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let bit = |b: &bool| if *b { "1" } else { "0" };
    for bag in bags {
        let mut rec = vec![bag.id.as_str()];
        rec.extend(bag.observed_labels.iter().map(bit));
        if with_truth {
            rec.extend(bag.true_labels.as_ref().expect("checked above").iter().map(bit));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a label file. With `n_classes = None` the class count is inferred
/// from the `obs_` columns.
pub fn read_labels(path: &Path, n_classes: Option<usize>) -> Result<(usize, Vec<LabelRow>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::LabelFormat {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("{other:?}"),
        },
    })?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let label_cols = header.len().saturating_sub(1);
    let c = n_classes.unwrap_or_else(|| header.iter().filter(|h| h.starts_with("obs_")).count());
    let with_truth = match label_cols {
        n if n == c && c > 0 => false,
        n if n == 2 * c && c > 0 => true,
        n => {
            return Err(Error::LabelColumns {
                path: path.to_path_buf(),
                expected: c,
                found: n,
            })
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let parse = |s: &str| match s.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::LabelFormat {
                path: path.to_path_buf(),
                line,
                detail: format!("label entry {other:?} is not 0 or 1"),
            }),
        };
        let values = rec.iter().skip(1).map(parse).collect::<Result<Vec<bool>>>()?;
        rows.push(LabelRow {
            bag_id: rec[0].to_string(),
            observed: values[..c].to_vec(),
            truth: with_truth.then(|| values[c..].to_vec()),
        });
    }
    Ok((c, rows))
}

fn write_events(path: &Path, bags: &[Bag]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bag_id", "class", "start", "len"]).map_err(|e| csv_err(path, e))?;
    for bag in bags {
        for e in &bag.events {
            w.write_record([bag.id.clone(), e.class.to_string(), e.start.to_string(), e.len.to_string()])
                .map_err(|er| csv_err(path, er))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_events(path: &Path) -> Result<Vec<(String, Event)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |j: usize| {
            rec.get(j).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| Error::LabelFormat {
                path: path.to_path_buf(),
                line: i + 2,
                detail: format!("column {j} is not a non-negative integer"),
            })
        };
        out.push((
            rec[0].to_string(),
            Event {
                class: num(1)?,
                start: num(2)?,
                len: num(3)?,
            },
        ));
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn feature_path(split_dir: &Path, bag_id: &str) -> PathBuf {
    split_dir.join("features").join(format!("{bag_id}.sstn"))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    if let Some(spec) = &dataset.spec {
        let path = dir.join("spec.json");
        let text = serde_json::to_string_pretty(spec)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    for split in Split::ALL {
        let bags = dataset.split(split);
        let split_dir = dir.join(split.name());
        create_dir(&split_dir.join("features"))?;
        write_labels(&split_dir.join("labels.csv"), bags, dataset.n_classes)?;
        if bags.iter().any(|b| !b.events.is_empty()) {
            write_events(&split_dir.join("events.csv"), bags)?;
        }
        for bag in bags {
            write_features(&feature_path(&split_dir, &bag.id), &bag.features)?;
        }
    }
    Ok(())
}

fn load_split(split_dir: &Path, n_classes: Option<usize>) -> Result<(usize, Vec<Bag>)> {
    let labels = split_dir.join("labels.csv");
    if !labels.exists() {
        return Ok((n_classes.unwrap_or(0), Vec::new()));
    }
    let (c, rows) = read_labels(&labels, n_classes)?;
    let events_path = split_dir.join("events.csv");
    let mut events = if events_path.exists() {
        read_events(&events_path)?
    } else {
        Vec::new()
    };
    let mut bags = Vec::with_capacity(rows.len());
    for row in rows {
        let features = read_features(&feature_path(split_dir, &row.bag_id))?;
        let mine: Vec<Event> = events.iter().filter(|(id, _)| *id == row.bag_id).map(|(_, e)| *e).collect();
        events.retain(|(id, _)| *id != row.bag_id);
        bags.push(Bag {
            id: row.bag_id,
            features,
            true_labels: row.truth,
            observed_labels: row.observed,
            events: mine,
        });
    }
    Ok((c, bags))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join("spec.json");
    let spec: Option<DatasetSpec> = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let mut n_classes = spec.as_ref().map(|s| s.n_classes);
    let (c, train) = load_split(&dir.join("train"), n_classes)?;
    n_classes.get_or_insert(c);
    let (_, val) = load_split(&dir.join("val"), n_classes)?;
    let (_, test) = load_split(&dir.join("test"), n_classes)?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(Dataset {
        n_classes: c,
        spec,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, 1e-3]).unwrap();
        let bytes = encode_features(&t);
        assert_eq!(&bytes[..4], b"SSTN");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 24);
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        let back = decode_features(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.data()[..5], t.data()[..5]);
        assert_eq!(back.data()[5], f64::from(1e-3f32));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let good = encode_features(&t);
        let p = Path::new("f.sstn");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(p, &bad), Err(Error::BadMagic { .. })));
        let msg = decode_features(p, &bad).unwrap_err().to_string();
        assert!(msg.contains("offset 0"), "{msg}");

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_features(p, &v2),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        let short = &good[..good.len() - 1];
        assert!(matches!(
            decode_features(p, short),
            Err(Error::Truncated { expected: 30, found: 29, .. })
        ));
    }
}
