//! CSV ingestion: header `label,p0,p1,...`, one example per line, pixel
//! intensities in `0..=255` (scaled to `[0, 1]` like IDX bytes).

use std::path::Path;

use super::{DataError, Dataset, Result, SplitTag};
use crate::tensor::Tensor;

pub fn load_csv(
    path: &Path,
    item_shape: [usize; 3],
    name: &str,
    split: SplitTag,
    classes: Option<usize>,
    id_offset: u64,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text, item_shape, name, split, classes, id_offset)
}

pub(crate) fn parse_csv(
    text: &str,
    item_shape: [usize; 3],
    name: &str,
    split: SplitTag,
    classes: Option<usize>,
    id_offset: u64,
) -> Result<Dataset> {
    let pixels: usize = item_shape.iter().product();
    let bad = |line: usize, message: String| DataError::Csv { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected_header = cols.len() == pixels + 1
        && cols[0] == "label"
        && cols[1..].iter().enumerate().all(|(i, c)| *c == format!("p{i}"));
    if !expected_header {
        return Err(bad(1, format!("header must be `label,p0..p{}`", pixels - 1)));
    }

    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != pixels + 1 {
            return Err(bad(lineno, format!("expected {} fields, got {}", pixels + 1, fields.len())));
        }
        let label = fields[0]
            .parse::<usize>()
            .map_err(|_| bad(lineno, format!("bad label `{}`", fields[0])))?;
        labels.push(label);
        for f in &fields[1..] {
            let v = f
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=255.0).contains(v))
                .ok_or_else(|| bad(lineno, format!("pixel `{f}` outside 0..=255")))?;
            data.push(v / 255.0);
        }
    }
    if labels.is_empty() {
        return Err(bad(2, "no examples".into()));
    }
    let n = labels.len();
    let [c, h, w] = item_shape;
    let images = Tensor::new(vec![n, c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let ids = (0..n as u64).map(|i| id_offset + i).collect();
    Dataset::new(name, split, images, labels, ids, classes)
}
