use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    frame_id: u64,
    annotations: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvBox {
    x: i64,
    y: i64,
    width: i64,
    height: i64,
}

/// Ground-truth boxes per frame, in original capture coordinates.
///
/// A frame present with an empty list is annotated as containing nothing; a
/// frame that is absent is not covered by the truth at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationTable {
    frames: BTreeMap<u64, Vec<BoundingBox>>,
}

impl AnnotationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_id: u64, boxes: Vec<BoundingBox>) {
        self.frames.insert(frame_id, boxes);
    }

    /// Boxes for `frame_id`; empty when the frame is absent.
    pub fn boxes(&self, frame_id: u64) -> &[BoundingBox] {
        self.frames.get(&frame_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn covers(&self, frame_id: u64) -> bool {
        self.frames.contains_key(&frame_id)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[BoundingBox])> {
        self.frames.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    /// Keep only the frames for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(u64) -> bool) {
        self.frames.retain(|k, _| keep(*k));
    }

    /// Parse `frame_id,annotations` CSV where the second column holds a JSON
    /// list of `{"x","y","width","height"}` objects. Single-quoted
    /// Python-style lists, as found in the public dataset export, are
    /// accepted too.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| IngestError::Annotations(format!("{}: {e}", path.display())))?;
        let mut table = Self::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| IngestError::Annotations(format!("row {}: {e}", i + 1)))?;
            let json = row.annotations.replace('\'', "\"");
            let boxes: Vec<CsvBox> = serde_json::from_str(json.trim()).map_err(|e| {
                IngestError::Annotations(format!("frame {}: {e}", row.frame_id))
            })?;
            let boxes = boxes
                .into_iter()
                .map(|b| BoundingBox::new(b.x as f64, b.y as f64, b.width as f64, b.height as f64))
                .collect();
            table.frames.entry(row.frame_id).or_default().extend::<Vec<_>>(boxes);
        }
        Ok(table)
    }

    /// Write in the same layout [`read_csv`](Self::read_csv) accepts. Box
    /// coordinates are rounded to integers.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| IngestError::Storage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for (frame_id, boxes) in &self.frames {
            let list: Vec<CsvBox> = boxes
                .iter()
                .map(|b| CsvBox {
                    x: b.x.round() as i64,
                    y: b.y.round() as i64,
                    width: b.w.round() as i64,
                    height: b.h.round() as i64,
                })
                .collect();
            let row = CsvRow {
                frame_id: *frame_id,
                annotations: serde_json::to_string(&list).expect("plain struct serializes"),
            };
            wtr.serialize(row).map_err(|e| IngestError::Storage {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        wtr.flush().map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_json_and_python_style_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.csv");
        std::fs::write(
            &path,
            "frame_id,annotations\n\
             0,[]\n\
             1,\"[{\"\"x\"\":10,\"\"y\"\":20,\"\"width\"\":30,\"\"height\"\":40}]\"\n\
             2,\"[{'x': 1, 'y': 2, 'width': 3, 'height': 4}, {'x': 5, 'y': 6, 'width': 7, 'height': 8}]\"\n",
        )
        .unwrap();
        let t = AnnotationTable::read_csv(&path).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.covers(0) && t.boxes(0).is_empty());
        assert_eq!(t.boxes(1), &[BoundingBox::new(10.0, 20.0, 30.0, 40.0)]);
        assert_eq!(t.boxes(2).len(), 2);
        assert!(!t.covers(3));
        assert!(t.boxes(3).is_empty());

        let out = dir.path().join("again.csv");
        t.write_csv(&out).unwrap();
        assert_eq!(AnnotationTable::read_csv(&out).unwrap(), t);
    }

    #[test]
    fn malformed_list_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.csv");
        std::fs::write(&path, "frame_id,annotations\n3,not-json\n").unwrap();
        let err = AnnotationTable::read_csv(&path).unwrap_err();
        assert!(err.to_string().contains("frame 3"));
    }
}
