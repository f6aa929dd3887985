use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in pixel units, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x_min, self.y_min, self.x_max, self.y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateRegion(format!("non-finite box {c:?}")));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::DegenerateRegion(format!("empty box {c:?}")));
        }
        Ok(())
    }
}

/// Binary raster, row-major, origin top-left. Cell `(r, c)` covers the
/// pixel square `[c, c+1) x [r, r+1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::DegenerateRegion(format!(
                "mask {height}x{width} with {} cells",
                cells.len()
            )));
        }
        let m = Self { height, width, cells };
        m.validate()?;
        Ok(m)
    }

    /// Mask with every cell whose centre lies inside `b` set.
    pub fn from_bbox(b: &BBox, height: usize, width: usize) -> Self {
        let mut cells = vec![false; height * width];
        for r in 0..height {
            let cy = r as f64 + 0.5;
            if cy < b.y_min || cy >= b.y_max {
                continue;
            }
            for c in 0..width {
                let cx = c as f64 + 0.5;
                if cx >= b.x_min && cx < b.x_max {
                    cells[r * width + c] = true;
                }
            }
        }
        Self { height, width, cells }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        r < self.height && c < self.width && self.cells[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Set-cell bounding extent as `(row_min, row_max_exclusive)`.
    pub fn row_extent(&self) -> Option<(usize, usize)> {
        let rows: Vec<usize> = (0..self.height)
            .filter(|&r| self.cells[r * self.width..(r + 1) * self.width].iter().any(|&c| c))
            .collect();
        Some((*rows.first()?, *rows.last()? + 1))
    }

    /// Tight box around the set cells, in pixel units.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (r0, r1) = self.row_extent()?;
        let cols = (0..self.width).filter(|&c| (r0..r1).any(|r| self.cells[r * self.width + c]));
        let (mut c0, mut c1) = (usize::MAX, 0);
        for c in cols {
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        Some(BBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64))
    }

    /// Copy with every row outside `[keep_from, keep_to)` cleared.
    pub fn keep_rows(&self, keep_from: usize, keep_to: usize) -> Self {
        let mut cells = self.cells.clone();
        for r in 0..self.height {
            if r < keep_from || r >= keep_to {
                cells[r * self.width..(r + 1) * self.width].fill(false);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::DegenerateRegion("mask has no set cell".into()));
        }
        Ok(())
    }

    /// Run lengths over the row-major cells, starting with a run of unset
    /// cells (possibly zero).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, rle: &[u32]) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        let mut value = false;
        for &run in rle {
            cells.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        if cells.len() != height * width {
            return Err(Error::DegenerateRegion(format!(
                "run lengths cover {} cells, mask is {height}x{width}",
                cells.len()
            )));
        }
        Self::new(height, width, cells)
    }
}

/// Spatial support of an instance: a box or a raster mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub enum Region {
    BBox(BBox),
    Mask(Mask),
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        match self {
            Region::BBox(b) => b.validate(),
            Region::Mask(m) => m.validate(),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Region::BBox(b) => b.area(),
            Region::Mask(m) => m.count() as f64,
        }
    }

    pub fn bounding_box(&self) -> Option<BBox> {
        match self {
            Region::BBox(b) => Some(*b),
            Region::Mask(m) => m.bounding_box(),
        }
    }

    pub fn as_bbox(&self) -> Option<&BBox> {
        match self {
            Region::BBox(b) => Some(b),
            Region::Mask(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RegionRepr {
    Bbox([f64; 4]),
    Mask { height: usize, width: usize, rle: Vec<u32> },
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;

    fn try_from(r: RegionRepr) -> Result<Self> {
        match r {
            RegionRepr::Bbox([a, b, c, d]) => {
                let bb = BBox::new(a, b, c, d);
                bb.validate()?;
                Ok(Region::BBox(bb))
            }
            RegionRepr::Mask { height, width, rle } => Ok(Region::Mask(Mask::from_rle(height, width, &rle)?)),
        }
    }
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        match r {
            Region::BBox(b) => RegionRepr::Bbox([b.x_min, b.y_min, b.x_max, b.y_max]),
            Region::Mask(m) => RegionRepr::Mask {
                height: m.height,
                width: m.width,
                rle: m.to_rle(),
            },
        }
    }
}
