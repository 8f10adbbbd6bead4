use serde::{Deserialize, Serialize};

use super::{count_flops, count_params, memory_report, MemoryModel};
use crate::error::{Error, Result};
use crate::optim::OptimizerMode;
use crate::par::{self, Exec};
use crate::vit::{HeadType, ShapeConfig};

/// Candidate values for a shape search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_head")]
    pub head_type: HeadType,
}

fn default_patch() -> usize {
    14
}
fn default_classes() -> usize {
    1000
}
fn default_head() -> HeadType {
    HeadType::Map
}

impl GridSpec {
    pub fn new(widths: Vec<usize>, depths: Vec<usize>, heads: Vec<usize>, mlp_widths: Vec<usize>) -> Self {
        GridSpec {
            widths,
            depths,
            heads,
            mlp_widths,
            patch_size: default_patch(),
            num_classes: default_classes(),
            head_type: default_head(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.depths.is_empty() || self.heads.is_empty() || self.mlp_widths.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapefindRow {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub params: usize,
    pub flops: u64,
    /// `1 / flops`.
    pub speed: f64,
    pub fits: Vec<(OptimizerMode, bool)>,
}

/// Evaluate every valid grid combination (width divisible by heads). Rows
/// are sorted by depth, then width, heads and MLP width.
pub fn shapefind(
    grid: &GridSpec,
    res: usize,
    batch: usize,
    budget_bytes: f64,
    modes: &[OptimizerMode],
    exec: Exec,
) -> Result<Vec<ShapefindRow>> {
    grid.validate()?;
    let model = MemoryModel { budget_bytes, ..MemoryModel::default() };
    let mut combos = Vec::new();
    for &depth in &grid.depths {
        for &width in &grid.widths {
            for &heads in &grid.heads {
                for &mlp_width in &grid.mlp_widths {
                    if heads > 0 && width % heads == 0 {
                        combos.push(ShapeConfig {
                            width,
                            depth,
                            mlp_width,
                            heads,
                            patch_size: grid.patch_size,
                            image_res: res,
                            channels: 3,
                            num_classes: grid.num_classes,
                            head_type: grid.head_type,
                            map_mlp: false,
                        });
                    }
                }
            }
        }
    }
    let rows = par::map(exec, &combos, |s| -> Result<ShapefindRow> {
        s.validate()?;
        let (body, head) = count_params(s);
        let flops = count_flops(s, res);
        let fits = modes.iter().map(|&m| Ok((m, memory_report(s, m, batch, &model)?.fits))).collect::<Result<_>>()?;
        Ok(ShapefindRow {
            width: s.width,
            depth: s.depth,
            heads: s.heads,
            mlp_width: s.mlp_width,
            params: body + head,
            flops,
            speed: 1.0 / flops as f64,
            fits,
        })
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.depth, r.width, r.heads, r.mlp_width));
    Ok(rows)
}
