//! Semantic conditioning tensors built from nuclei label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nuclei class codes, following the Lizard label convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum NucleiClass {
    Background = 0,
    Neutrophil = 1,
    Epithelial = 2,
    Lymphocyte = 3,
    Plasma = 4,
    Eosinophil = 5,
    Connective = 6,
}

impl NucleiClass {
    pub const ALL: [NucleiClass; 7] = [
        NucleiClass::Background,
        NucleiClass::Neutrophil,
        NucleiClass::Epithelial,
        NucleiClass::Lymphocyte,
        NucleiClass::Plasma,
        NucleiClass::Eosinophil,
        NucleiClass::Connective,
    ];

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or(Error::InvalidClassCode(code))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            NucleiClass::Background => "background",
            NucleiClass::Neutrophil => "neutrophil",
            NucleiClass::Epithelial => "epithelial",
            NucleiClass::Lymphocyte => "lymphocyte",
            NucleiClass::Plasma => "plasma",
            NucleiClass::Eosinophil => "eosinophil",
            NucleiClass::Connective => "connective",
        }
    }
}

/// One-hot class channels (background + 6 nuclei types).
pub const NUM_CLASS_CHANNELS: usize = 7;
/// Class channels plus the instance-edge channel.
pub const COND_CHANNELS: usize = 8;
pub const EDGE_CHANNEL: usize = 7;

/// Channel-major `8 x H x W` binary layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningTensor {
    pub layout: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub is_null: bool,
}

impl ConditioningTensor {
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.layout[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.layout[(c * self.height + y) * self.width + x]
    }
}

/// The unconditional signal: every channel zero.
pub fn null_mask(height: usize, width: usize) -> ConditioningTensor {
    ConditioningTensor { layout: vec![0; COND_CHANNELS * height * width], height, width, is_null: true }
}

/// Builds the one-hot class layout plus the instance-edge channel.
///
/// A foreground pixel is an edge pixel when any in-bounds 4-neighbour carries a
/// different instance id (background counts as different).
pub fn encode(class_map: &[u8], inst_map: &[u32], height: usize, width: usize) -> Result<ConditioningTensor> {
    let n = height * width;
    if class_map.len() != n || inst_map.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "label maps must hold {height}x{width} values, got {} and {}",
            class_map.len(),
            inst_map.len()
        )));
    }
    let mut layout = vec![0u8; COND_CHANNELS * n];
    for (p, (&c, &inst)) in class_map.iter().zip(inst_map).enumerate() {
        if c as usize >= NUM_CLASS_CHANNELS {
            return Err(Error::InvalidClassCode(c as u32));
        }
        if (c == 0) != (inst == 0) {
            return Err(Error::InvalidAnnotation(format!(
                "pixel ({}, {}) has class {c} but instance {inst}",
                p / width,
                p % width
            )));
        }
        layout[c as usize * n + p] = 1;
    }
    let edge = &mut layout[EDGE_CHANNEL * n..];
    for y in 0..height {
        for x in 0..width {
            let id = inst_map[y * width + x];
            if id == 0 {
                continue;
            }
            let differs = |yy: usize, xx: usize| inst_map[yy * width + xx] != id;
            let on_edge = (y > 0 && differs(y - 1, x))
                || (y + 1 < height && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < width && differs(y, x + 1));
            if on_edge {
                edge[y * width + x] = 1;
            }
        }
    }
    Ok(ConditioningTensor { layout, height, width, is_null: false })
}
