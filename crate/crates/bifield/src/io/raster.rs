//! ESRI-ASCII-style plain-text rasters and the grid geometry they share.

use crate::error::{Error, Result};
use crate::mesh::Point2;

/// Regular grid: lower-left corner, cell counts, square cell size (km).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub nx: usize,
    pub ny: usize,
    pub cell_km: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Schema("grid needs nx, ny >= 1".into()));
        }
        if !(self.cell_km > 0.0) {
            return Err(Error::Schema(format!(
                "grid cell size must be positive, got {}",
                self.cell_km
            )));
        }
        if !self.x0.is_finite() || !self.y0.is_finite() || !self.cell_km.is_finite() {
            return Err(Error::Schema("grid origin/cell must be finite".into()));
        }
        Ok(())
    }

    /// Parse the compact `x0,y0,nx,ny,cell_km` form used on the command
    /// line and in config files.
    pub fn parse(s: &str) -> Result<GridSpec> {
        let parts: Vec<&str> = s.split(',').map(|p| p.trim()).collect();
        if parts.len() != 5 {
            return Err(Error::Schema(format!(
                "grid spec must be 'x0,y0,nx,ny,cell_km', got '{s}'"
            )));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Schema(format!("grid spec: bad {name} '{}'", parts[i])))
        };
        let int = |i: usize, name: &str| -> Result<usize> {
            parts[i]
                .parse()
                .map_err(|_| Error::Schema(format!("grid spec: bad {name} '{}'", parts[i])))
        };
        let g = GridSpec {
            x0: num(0, "x0")?,
            y0: num(1, "y0")?,
            nx: int(2, "nx")?,
            ny: int(3, "ny")?,
            cell_km: num(4, "cell_km")?,
        };
        g.validate()?;
        Ok(g)
    }

    /// Center of the cell in column `col`, row `row` counted from the
    /// bottom.
    pub fn cell_center(&self, col: usize, row_from_bottom: usize) -> Point2 {
        Point2::new(
            self.x0 + (col as f64 + 0.5) * self.cell_km,
            self.y0 + (row_from_bottom as f64 + 0.5) * self.cell_km,
        )
    }
}

pub const NODATA: f64 = -9999.0;

/// Grid plus row-major values, first row northernmost (the ESRI layout).
#[derive(Debug, Clone)]
pub struct Raster {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub nodata: f64,
}

impl Raster {
    pub fn filled(grid: GridSpec, fill: f64) -> Raster {
        Raster {
            grid,
            values: vec![fill; grid.nx * grid.ny],
            nodata: NODATA,
        }
    }

    #[inline]
    fn index(&self, col: usize, row_from_bottom: usize) -> usize {
        let row_top = self.grid.ny - 1 - row_from_bottom;
        row_top * self.grid.nx + col
    }

    pub fn get(&self, col: usize, row_from_bottom: usize) -> f64 {
        self.values[self.index(col, row_from_bottom)]
    }

    pub fn set(&mut self, col: usize, row_from_bottom: usize, v: f64) {
        let i = self.index(col, row_from_bottom);
        self.values[i] = v;
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || v.is_nan()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("ncols {}\n", self.grid.nx));
        s.push_str(&format!("nrows {}\n", self.grid.ny));
        s.push_str(&format!("xllcorner {}\n", self.grid.x0));
        s.push_str(&format!("yllcorner {}\n", self.grid.y0));
        s.push_str(&format!("cellsize {}\n", self.grid.cell_km));
        s.push_str(&format!("NODATA_value {}\n", self.nodata));
        for row in self.values.chunks(self.grid.nx) {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                s.push_str(&format!("{v}"));
                first = false;
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Raster> {
        let mut lines = text.lines().enumerate();
        let mut header = std::collections::BTreeMap::new();
        let expected = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"];
        for want in expected {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::Schema(format!("raster truncated before '{want}'")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(v), None) if k.eq_ignore_ascii_case(want) => {
                    let parsed: f64 = v.parse().map_err(|_| {
                        Error::Schema(format!("raster line {}: bad value '{v}'", ln + 1))
                    })?;
                    header.insert(want, parsed);
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "raster line {}: expected '{want} <value>'",
                        ln + 1
                    )))
                }
            }
        }
        let nx = header["ncols"];
        let ny = header["nrows"];
        if nx < 1.0 || ny < 1.0 || nx.fract() != 0.0 || ny.fract() != 0.0 || nx * ny > 1e8 {
            return Err(Error::Schema(format!("bad raster dimensions {nx} x {ny}")));
        }
        let (nx, ny) = (nx as usize, ny as usize);
        let grid = GridSpec {
            x0: header["xllcorner"],
            y0: header["yllcorner"],
            nx,
            ny,
            cell_km: header["cellsize"],
        };
        grid.validate()?;
        let mut values = Vec::with_capacity(nx * ny);
        for (ln, line) in lines {
            for tok in line.split_whitespace() {
                if values.len() >= nx * ny {
                    return Err(Error::Schema(format!(
                        "raster line {}: more than {} values",
                        ln + 1,
                        nx * ny
                    )));
                }
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Schema(format!("raster line {}: bad value '{tok}'", ln + 1))
                })?;
                values.push(v);
            }
        }
        if values.len() != nx * ny {
            return Err(Error::Schema(format!(
                "raster has {} values, expected {}",
                values.len(),
                nx * ny
            )));
        }
        Ok(Raster {
            grid,
            values,
            nodata: header["NODATA_value"],
        })
    }

    /// Check that another raster shares this grid geometry (tolerance on
    /// the float fields).
    pub fn aligned_with(&self, grid: &GridSpec) -> bool {
        self.grid.nx == grid.nx
            && self.grid.ny == grid.ny
            && (self.grid.x0 - grid.x0).abs() < 1e-9
            && (self.grid.y0 - grid.y0).abs() < 1e-9
            && (self.grid.cell_km - grid.cell_km).abs() < 1e-9
    }
}
