use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GtBox, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::numcore::Matrix;

pub const DATASET_FORMAT: &str = "boicr-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub count: usize,
}

fn sample_record(s: &ImageSample) -> Value {
    let labels: Vec<usize> = (0..s.labels.len()).filter(|&c| s.labels[c]).map(|c| c + 1).collect();
    let features: Vec<&[f64]> = (0..s.features.rows()).map(|r| s.features.row(r)).collect();
    let mut rec = json!({
        "image_id": s.image_id,
        "labels": labels,
        "proposals": s.proposals,
        "features": features,
    });
    if let Some(gt) = s.ground_truth() {
        rec["gt"] = json!(gt);
    }
    rec
}

/// Writes a header line followed by one JSON record per image.
pub fn save_dataset(path: &Path, samples: &[ImageSample], num_classes: usize, feature_dim: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        num_classes,
        feature_dim,
        count: samples.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, &sample_record(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), line: self.line, field: field.into(), message: message.into() }
    }

    fn get<'v>(&self, obj: &'v Value, field: &str) -> Result<&'v Value> {
        obj.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn array<'v>(&self, v: &'v Value, field: &str) -> Result<&'v Vec<Value>> {
        v.as_array().ok_or_else(|| self.err(field, "expected an array"))
    }

    fn number(&self, v: &Value, field: &str) -> Result<f64> {
        v.as_f64().ok_or_else(|| self.err(field, format!("expected a number, got {v}")))
    }

    fn bbox(&self, v: &Value, field: &str) -> Result<BBox> {
        let a = self.array(v, field)?;
        if a.len() != 4 {
            return Err(self.err(field, format!("expected [x1,y1,x2,y2], got {} values", a.len())));
        }
        let c: Vec<f64> = a.iter().map(|x| self.number(x, field)).collect::<Result<_>>()?;
        let b = BBox::new(c[0], c[1], c[2], c[3]);
        if !b.is_valid() {
            return Err(self.err(field, format!("invalid box {c:?}")));
        }
        Ok(b)
    }

    fn class_id(&self, v: &Value, field: &str, num_classes: usize) -> Result<usize> {
        let id = v.as_u64().ok_or_else(|| self.err(field, format!("expected a class id, got {v}")))? as usize;
        if id == 0 || id > num_classes {
            return Err(self.err(field, format!("class id {id} outside 1..={num_classes}")));
        }
        Ok(id)
    }
}

fn parse_sample(ctx: &LineCtx, line: &str, header: &DatasetHeader) -> Result<ImageSample> {
    let rec: Value = serde_json::from_str(line).map_err(|e| ctx.err("<record>", e.to_string()))?;
    let image_id =
        ctx.get(&rec, "image_id")?.as_str().ok_or_else(|| ctx.err("image_id", "expected a string"))?.to_string();

    let mut labels = vec![false; header.num_classes];
    for v in ctx.array(ctx.get(&rec, "labels")?, "labels")? {
        labels[ctx.class_id(v, "labels", header.num_classes)? - 1] = true;
    }

    let proposals: Vec<BBox> = ctx
        .array(ctx.get(&rec, "proposals")?, "proposals")?
        .iter()
        .map(|v| ctx.bbox(v, "proposals"))
        .collect::<Result<_>>()?;
    if proposals.is_empty() {
        return Err(ctx.err("proposals", "at least one proposal is required"));
    }

    let rows = ctx.array(ctx.get(&rec, "features")?, "features")?;
    if rows.len() != proposals.len() {
        return Err(ctx.err("features", format!("{} rows for {} proposals", rows.len(), proposals.len())));
    }
    let mut data = Vec::with_capacity(rows.len() * header.feature_dim);
    for row in rows {
        let row = ctx.array(row, "features")?;
        if row.len() != header.feature_dim {
            return Err(ctx.err("features", format!("row of {} values, expected {}", row.len(), header.feature_dim)));
        }
        for v in row {
            data.push(ctx.number(v, "features")?);
        }
    }
    let features = Matrix::from_vec(proposals.len(), header.feature_dim, data)?;

    let gt = match rec.get("gt") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            ctx.array(v, "gt")?
                .iter()
                .map(|g| {
                    Ok(GtBox {
                        class_id: ctx.class_id(ctx.get(g, "class")?, "gt.class", header.num_classes)?,
                        bbox: ctx.bbox(ctx.get(g, "box")?, "gt.box")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };

    ImageSample::new(image_id, labels, proposals, features, gt).map_err(|e| ctx.err("<record>", e.to_string()))
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ImageSample>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let ctx = LineCtx { path, line: 1 };
    let first = lines.next().ok_or_else(|| ctx.err("<header>", "empty file"))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| ctx.err("<header>", e.to_string()))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(ctx.err("<header>", format!("unsupported format {} v{}", header.format, header.version)));
    }

    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: i + 2 };
        samples.push(parse_sample(&ctx, &line, &header)?);
    }
    if samples.len() != header.count {
        return Err(ctx.err("count", format!("header says {}, file has {}", header.count, samples.len())));
    }
    Ok((header, samples))
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        DetectionRecord { image_id: image_id.into(), class_id: d.class_id, bbox: d.bbox, score: d.score }
    }

    pub fn detection(&self) -> Detection {
        Detection { bbox: self.bbox, class_id: self.class_id, score: self.score }
    }
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
