use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{HeadType, ShapeConfig};

/// One row of the published model-shape table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub name: String,
    pub width: usize,
    pub depth: usize,
    pub mlp: usize,
    pub heads: usize,
    pub params_mio: f64,
    pub gflops_224: f64,
    pub gflops_384: f64,
}

impl ShapeRow {
    /// Patch size from the `Name/patch` convention.
    pub fn patch_size(&self) -> Result<usize> {
        self.name
            .rsplit_once('/')
            .and_then(|(_, p)| p.parse().ok())
            .ok_or_else(|| Error::Format(format!("model name `{}` has no /patch suffix", self.name)))
    }

    /// The shape at 224 px with a MAP head and 1000 classes.
    pub fn shape(&self) -> Result<ShapeConfig> {
        Ok(ShapeConfig {
            width: self.width,
            depth: self.depth,
            mlp_width: self.mlp,
            heads: self.heads,
            patch_size: self.patch_size()?,
            image_res: 224,
            channels: 3,
            num_classes: 1000,
            head_type: HeadType::Map,
            map_mlp: false,
        })
    }
}

pub fn parse_table2(text: &str, source: &str) -> Result<Vec<ShapeRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ShapeRow>() {
        let row = rec.map_err(|e| Error::Parse {
            path: source.to_string(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        row.patch_size()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_table2(path: impl AsRef<Path>) -> Result<Vec<ShapeRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table2(&text, &path.display().to_string())
}
