//! Soft-tissue extraction: threshold, keep the largest component, fill
//! holes, smooth and rebinarise the mask, then apply it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{gaussian_smooth, LabelVolume, Volume3};

/// Value written outside the mask (air).
pub const BACKGROUND_HU: f32 = -1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;
    fn try_from(n: u32) -> Result<Self> {
        Connectivity::from_count(n)
    }
}

impl From<Connectivity> for u32 {
    fn from(c: Connectivity) -> u32 {
        c.count()
    }
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::invalid(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripParams {
    pub tissue_low_hu: f64,
    pub tissue_high_hu: f64,
    pub fill_connectivity: Connectivity,
    pub component_connectivity: Connectivity,
    pub mask_smooth_sigma_mm: f64,
    pub mask_rebinarize_level: f64,
}

impl Default for StripParams {
    fn default() -> Self {
        StripParams {
            tissue_low_hu: 0.0,
            tissue_high_hu: 100.0,
            fill_connectivity: Connectivity::Six,
            component_connectivity: Connectivity::TwentySix,
            mask_smooth_sigma_mm: 1.0,
            mask_rebinarize_level: 0.5,
        }
    }
}

impl StripParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tissue_low_hu < self.tissue_high_hu) {
            return Err(Error::invalid("tissue_low_hu must be below tissue_high_hu"));
        }
        if !(self.mask_smooth_sigma_mm >= 0.0) {
            return Err(Error::invalid("mask_smooth_sigma_mm must be non-negative"));
        }
        if !(self.mask_rebinarize_level > 0.0 && self.mask_rebinarize_level < 1.0) {
            return Err(Error::invalid("mask_rebinarize_level must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Binary mask of voxels with `low <= value <= high`.
pub fn threshold_mask(vol: &Volume3, low: f64, high: f64) -> Result<LabelVolume> {
    if !(low < high) {
        return Err(Error::invalid(format!("threshold low {low} must be below high {high}")));
    }
    let data = vol
        .data()
        .iter()
        .map(|&v| u32::from(v as f64 >= low && v as f64 <= high))
        .collect();
    LabelVolume::new(vol.grid().clone(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mask: LabelVolume,
    pub size: usize,
    /// Set when the input had no foreground.
    pub empty: bool,
}

fn neighbours(dims: [usize; 3], idx: usize, offsets: &[[isize; 3]], mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = dims;
    let (i, j, k) = ((idx % nx) as isize, ((idx / nx) % ny) as isize, (idx / (nx * ny)) as isize);
    for o in offsets {
        let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
        if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
            continue;
        }
        f(a as usize + nx * (b as usize + ny * c as usize));
    }
}

/// Keeps only the largest connected foreground component. Ties go to the
/// component containing the smallest linear index.
pub fn largest_component(mask: &LabelVolume, connectivity: Connectivity) -> Component {
    let dims = mask.dims();
    let data = mask.data();
    let offsets = connectivity.offsets();
    let mut comp = vec![0u32; data.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next_id = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || comp[start] != 0 {
            continue;
        }
        next_id += 1;
        comp[start] = next_id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            neighbours(dims, idx, &offsets, |n| {
                if data[n] != 0 && comp[n] == 0 {
                    comp[n] = next_id;
                    queue.push_back(n);
                }
            });
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next_id, size));
        }
    }
    let grid = mask.grid().clone();
    match best {
        None => Component { mask: LabelVolume::empty(grid), size: 0, empty: true },
        Some((id, size)) => {
            let out = comp.iter().map(|&c| u32::from(c == id)).collect();
            Component { mask: LabelVolume::new(grid, out).expect("same grid"), size, empty: false }
        }
    }
}

/// Fills enclosed background: voxels not reachable from the grid boundary
/// through background become foreground.
pub fn fill_holes(mask: &LabelVolume, connectivity: Connectivity) -> LabelVolume {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let offsets = connectivity.offsets();
    let mut outside = vec![false; data.len()];
    let mut queue = VecDeque::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let on_face = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                let idx = i + nx * (j + ny * k);
                if on_face && data[idx] == 0 && !outside[idx] {
                    outside[idx] = true;
                    queue.push_back(idx);
                }
            }
        }
    }
    while let Some(idx) = queue.pop_front() {
        neighbours([nx, ny, nz], idx, &offsets, |n| {
            if data[n] == 0 && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        });
    }
    let out = outside.iter().map(|&o| u32::from(!o)).collect();
    LabelVolume::new(mask.grid().clone(), out).expect("same grid")
}

#[derive(Debug, Clone)]
pub struct StripResult {
    pub stripped: Volume3,
    pub mask: LabelVolume,
    pub warnings: Vec<String>,
}

/// Mask before smoothing: threshold, largest component, hole fill.
pub fn tissue_mask(vol: &Volume3, params: &StripParams) -> Result<(LabelVolume, Vec<String>)> {
    params.validate()?;
    let mut warnings = Vec::new();
    let raw = threshold_mask(vol, params.tissue_low_hu, params.tissue_high_hu)?;
    let comp = largest_component(&raw, params.component_connectivity);
    if comp.empty {
        warnings.push("threshold produced an empty mask".to_string());
    }
    Ok((fill_holes(&comp.mask, params.fill_connectivity), warnings))
}

/// Full bone-strip recipe. Errors if the final mask is empty, which usually
/// means the input is not HU-calibrated.
pub fn strip(vol: &Volume3, params: &StripParams) -> Result<StripResult> {
    let (filled, warnings) = tissue_mask(vol, params)?;
    let mask = if params.mask_smooth_sigma_mm > 0.0 {
        let s = params.mask_smooth_sigma_mm;
        let smooth = gaussian_smooth(&filled.to_volume(), [s, s, s])?;
        let level = params.mask_rebinarize_level as f32;
        let data = smooth.data().iter().map(|&v| u32::from(v >= level)).collect();
        LabelVolume::new(vol.grid().clone(), data)?
    } else {
        filled
    };
    if mask.count_foreground() == 0 {
        return Err(Error::EmptyMask("bone strip removed every voxel; is the input HU-calibrated?".into()));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0 { v } else { BACKGROUND_HU })
        .collect();
    Ok(StripResult { stripped: vol.with_data(data)?, mask, warnings })
}
