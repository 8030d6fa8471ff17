//! RGB frames, the ZOOM-IN tool and the tool registry used by the controller.

use crate::trace::{Region, ToolSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        ((y * self.width + x) * 3) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn full_region(&self) -> Region {
        Region::new(0, 0, self.width, self.height)
    }

    /// Mean colour of each `cell x cell` block, row-major over blocks.
    pub fn pooled(&self, cell: u32) -> Vec<[f64; 3]> {
        let (gw, gh) = (self.width / cell, self.height / cell);
        let mut out = Vec::with_capacity((gw * gh) as usize);
        let n = f64::from(cell * cell);
        for by in 0..gh {
            for bx in 0..gw {
                let mut acc = [0u32; 3];
                for y in by * cell..(by + 1) * cell {
                    for x in bx * cell..(bx + 1) * cell {
                        let p = self.get(x, y);
                        for c in 0..3 {
                            acc[c] += u32::from(p[c]);
                        }
                    }
                }
                out.push([
                    f64::from(acc[0]) / n,
                    f64::from(acc[1]) / n,
                    f64::from(acc[2]) / n,
                ]);
            }
        }
        out
    }
}

/// Evidence returned by a visual tool: a resampled crop and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationPatch {
    pub pixels: Image,
    pub source_region: Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ToolError {
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("region {0:?} lies outside the frame")]
    RegionOutOfBounds(Region),
    #[error("region {0:?} is empty")]
    EmptyRegion(Region),
}

/// Nearest-neighbour resample of `image[x0..x1, y0..y1]` to `resolution x resolution`.
pub fn zoom_in(
    image: &Image,
    region: Region,
    resolution: u32,
) -> Result<ObservationPatch, ToolError> {
    if region.x0 >= region.x1 || region.y0 >= region.y1 {
        return Err(ToolError::EmptyRegion(region));
    }
    if region.x1 > image.width || region.y1 > image.height {
        return Err(ToolError::RegionOutOfBounds(region));
    }
    let (w, h) = (region.width() as u64, region.height() as u64);
    let e = u64::from(resolution);
    let mut out = Image::filled(resolution, resolution, [0, 0, 0]);
    for j in 0..resolution {
        let sy = region.y0 + (u64::from(j) * h / e) as u32;
        for i in 0..resolution {
            let sx = region.x0 + (u64::from(i) * w / e) as u32;
            out.set(i, j, image.get(sx, sy));
        }
    }
    Ok(ObservationPatch {
        pixels: out,
        source_region: region,
    })
}

/// A visual tool callable from a reasoning trace.
pub trait VisualTool: Send + Sync {
    fn execute(&self, image: &Image, region: Region) -> Result<ObservationPatch, ToolError>;
}

#[derive(Debug, Clone, Copy)]
pub struct ZoomIn {
    pub resolution: u32,
}

impl VisualTool for ZoomIn {
    fn execute(&self, image: &Image, region: Region) -> Result<ObservationPatch, ToolError> {
        zoom_in(image, region, self.resolution)
    }
}

/// Immutable name -> tool map; unknown names fail closed.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn VisualTool>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.tools.keys()).finish()
    }
}

impl ToolRegistry {
    /// Registry with no tools: every call yields an error evidence.
    pub fn empty() -> Self {
        ToolRegistry::default()
    }

    pub fn with_zoom(resolution: u32) -> Self {
        ToolRegistry::empty().with_tool("zoom_in", ZoomIn { resolution })
    }

    pub fn with_tool(mut self, name: &str, tool: impl VisualTool + 'static) -> Self {
        self.tools.insert(name.to_string(), Arc::new(tool));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&dyn VisualTool> {
        self.tools.get(name).map(|t| t.as_ref())
    }
}

/// What the controller injects at an evidence position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvidencePayload {
    Patch(ObservationPatch),
    ToolError(ToolError),
}

impl EvidencePayload {
    pub fn patch(&self) -> Option<&ObservationPatch> {
        match self {
            EvidencePayload::Patch(p) => Some(p),
            EvidencePayload::ToolError(_) => None,
        }
    }
}

pub fn execute_tool_call(
    registry: &ToolRegistry,
    call: &ToolSpec,
    image: &Image,
) -> EvidencePayload {
    let result = match registry.get(&call.name) {
        None => Err(ToolError::UnknownTool(call.name.clone())),
        Some(tool) => tool.execute(image, call.region),
    };
    match result {
        Ok(p) => EvidencePayload::Patch(p),
        Err(e) => EvidencePayload::ToolError(e),
    }
}
