use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::model::{random_rotation_rows, Frame2D, Shape3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    KeypointsJson,
    MocapCsv,
}

impl DataFormat {
    /// `.csv` is mocap-csv, anything else keypoints-json.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::MocapCsv,
            _ => DataFormat::KeypointsJson,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keypoints-json" => Ok(DataFormat::KeypointsJson),
            "mocap-csv" => Ok(DataFormat::MocapCsv),
            other => Err(Error::Config(format!(
                "unknown data format {other:?} (expected keypoints-json or mocap-csv)"
            ))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::KeypointsJson => "keypoints-json",
            DataFormat::MocapCsv => "mocap-csv",
        })
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    match format {
        DataFormat::KeypointsJson => parse_json(&text, &path.display().to_string()),
        DataFormat::MocapCsv => parse_csv(&text, name, &path.display().to_string()),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let text = match format {
        DataFormat::KeypointsJson => to_json(ds)?,
        DataFormat::MocapCsv => to_csv(ds)?,
    };
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    name: String,
    #[serde(rename = "P")]
    points: usize,
    frames: Vec<JsonFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<JsonShape>>,
}

#[derive(Serialize, Deserialize)]
struct JsonFrame {
    id: usize,
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct JsonShape {
    points3d: Vec<[f64; 3]>,
}

fn parse_json(text: &str, source: &str) -> Result<Dataset> {
    let doc: JsonDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("{source}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let p = doc.points;
    let mut frames = Vec::with_capacity(doc.frames.len());
    for (pos, f) in doc.frames.iter().enumerate() {
        if f.points.len() != p {
            return Err(Error::Format(format!(
                "{source}: frame {} has {} points, header says P = {p}",
                f.id,
                f.points.len()
            )));
        }
        let mask = f.mask.clone().unwrap_or_else(|| vec![true; p]);
        if mask.len() != p {
            return Err(Error::Format(format!(
                "{source}: frame {} has a mask of {} for P = {p}",
                f.id,
                mask.len()
            )));
        }
        let w = Mat::from_fn(2, p, |r, c| if mask[c] { f.points[c][r] } else { 0.0 });
        frames.push(Frame2D::new(w, mask, pos)?);
    }
    let gt = match doc.gt {
        None => None,
        Some(shapes) => {
            let mut out = Vec::with_capacity(shapes.len());
            for (i, s) in shapes.iter().enumerate() {
                if s.points3d.len() != p {
                    return Err(Error::Format(format!(
                        "{source}: ground truth {i} has {} points, header says P = {p}",
                        s.points3d.len()
                    )));
                }
                out.push(Shape3D::new(Mat::from_fn(3, p, |r, c| s.points3d[c][r]))?);
            }
            Some(out)
        }
    };
    Dataset::new(doc.name, frames, gt)
}

fn to_json(ds: &Dataset) -> Result<String> {
    let p = ds.points();
    let frames = ds
        .frames()
        .iter()
        .map(|f| JsonFrame {
            id: f.index(),
            points: (0..p).map(|c| [f.w().get(0, c), f.w().get(1, c)]).collect(),
            mask: (f.visible_count() != p).then(|| f.mask().to_vec()),
        })
        .collect();
    let gt = ds.gt().map(|g| {
        g.iter()
            .map(|s| JsonShape {
                points3d: (0..p)
                    .map(|c| [s.s().get(0, c), s.s().get(1, c), s.s().get(2, c)])
                    .collect(),
            })
            .collect()
    });
    let doc = JsonDoc {
        name: ds.name().to_string(),
        points: p,
        frames,
        gt,
    };
    Ok(serde_json::to_string(&doc)?)
}

/// Column layout of a mocap-csv header.
struct CsvLayout {
    points: usize,
    xy: Option<Vec<[usize; 2]>>,
    xyz: Option<Vec<[usize; 3]>>,
}

fn csv_layout(header: &csv::StringRecord, source: &str) -> Result<CsvLayout> {
    let find = |name: String| header.iter().position(|h| h.trim() == name);
    let count = |prefix: char| {
        (0..)
            .take_while(|p| find(format!("{prefix}{p}")).is_some())
            .count()
    };
    let (n2, n3) = (count('x'), count('X'));
    let points = n2.max(n3);
    if points == 0 {
        return Err(Error::Parse {
            location: format!("{source}:1"),
            message: "header has neither x0,y0,... nor X0,Y0,Z0,... columns".into(),
        });
    }
    let col = |name: String| {
        find(name.clone()).ok_or_else(|| Error::Parse {
            location: format!("{source}:1"),
            message: format!("missing column {name}"),
        })
    };
    let xy = if n2 > 0 {
        if n2 != points {
            return Err(Error::Format(format!(
                "{source}: {n2} 2D points but {n3} 3D points in header"
            )));
        }
        Some(
            (0..points)
                .map(|p| Ok([col(format!("x{p}"))?, col(format!("y{p}"))?]))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let xyz = if n3 > 0 {
        if n3 != points {
            return Err(Error::Format(format!(
                "{source}: {n2} 2D points but {n3} 3D points in header"
            )));
        }
        Some(
            (0..points)
                .map(|p| {
                    Ok([
                        col(format!("X{p}"))?,
                        col(format!("Y{p}"))?,
                        col(format!("Z{p}"))?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(CsvLayout { points, xy, xyz })
}

/// `None` for an empty or `nan` cell (occluded point).
fn cell(record: &csv::StringRecord, col: usize, line: u64, source: &str) -> Result<Option<f64>> {
    let raw = record.get(col).unwrap_or("").trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        location: format!("{source}:{line}"),
        message: format!("column {}: {e} ({raw:?})", col + 1),
    })
}

fn parse_csv(text: &str, name: String, source: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse {
            location: format!("{source}:{line}"),
            message: e.to_string(),
        }
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    let layout = csv_layout(&header, source)?;
    let p = layout.points;
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    let mut camera_rng = ChaCha8Rng::seed_from_u64(0);
    for (pos, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|q| q.line()).unwrap_or(pos as u64 + 2);
        let shape = match &layout.xyz {
            Some(cols) => {
                let mut s = Mat::zeros(3, p);
                for (c, idx) in cols.iter().enumerate() {
                    for (r, &col) in idx.iter().enumerate() {
                        let v = cell(&record, col, line, source)?.ok_or_else(|| Error::Parse {
                            location: format!("{source}:{line}"),
                            message: format!("missing 3D coordinate for point {c}"),
                        })?;
                        s.set(r, c, v);
                    }
                }
                Some(s)
            }
            None => None,
        };
        let (w, mask) = match &layout.xy {
            Some(cols) => {
                let mut w = Mat::zeros(2, p);
                let mut mask = vec![true; p];
                for (c, [cx, cy]) in cols.iter().enumerate() {
                    match (cell(&record, *cx, line, source)?, cell(&record, *cy, line, source)?) {
                        (Some(x), Some(y)) => {
                            w.set(0, c, x);
                            w.set(1, c, y);
                        }
                        _ => mask[c] = false,
                    }
                }
                (w, mask)
            }
            None => {
                let s = shape.as_ref().expect("layout has 3D columns");
                (random_rotation_rows(&mut camera_rng).matmul(s)?, vec![true; p])
            }
        };
        frames.push(Frame2D::new(w, mask, pos)?);
        if let Some(s) = shape {
            gt.push(Shape3D::new(s)?);
        }
    }
    let gt = layout.xyz.is_some().then_some(gt);
    Dataset::new(name, frames, gt)
}

fn to_csv(ds: &Dataset) -> Result<String> {
    let p = ds.points();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..p).flat_map(|c| [format!("x{c}"), format!("y{c}")]).collect();
    if ds.gt().is_some() {
        header.extend((0..p).flat_map(|c| [format!("X{c}"), format!("Y{c}"), format!("Z{c}")]));
    }
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    writer.write_record(&header).map_err(to_io)?;
    for (i, f) in ds.frames().iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for c in 0..p {
            for r in 0..2 {
                row.push(if f.mask()[c] {
                    f.w().get(r, c).to_string()
                } else {
                    String::new()
                });
            }
        }
        if let Some(g) = ds.gt() {
            for c in 0..p {
                for r in 0..3 {
                    row.push(g[i].s().get(r, c).to_string());
                }
            }
        }
        writer.write_record(&row).map_err(to_io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
