//! Coarse-cell selections: `all`, rectangles of centroids, or explicit ids.

use std::fmt;
use std::str::FromStr;

use msinv_core::geometry::CoarseMesh;

#[derive(Debug, Clone, PartialEq)]
pub enum CellSpec {
    All,
    /// Cells whose centroid lies in any closed rectangle `[x0, x1] x [y0, y1]`.
    Rectangles(Vec<[f64; 4]>),
    Ids(Vec<usize>),
}

impl FromStr for CellSpec {
    type Err = String;

    /// `all` | `rect x0 y0 x1 y1; rect ...` | `ids 3, 4, 17`
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(rest) = s.strip_prefix("ids") {
            let ids = rest
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>().map_err(|_| format!("invalid cell id `{t}`")))
                .collect::<Result<Vec<_>, _>>()?;
            if ids.is_empty() {
                return Err("`ids` needs at least one cell id".into());
            }
            return Ok(Self::Ids(ids));
        }
        if s.starts_with("rect") {
            let mut rects = Vec::new();
            for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                let body = part
                    .strip_prefix("rect")
                    .ok_or_else(|| format!("expected `rect x0 y0 x1 y1`, got `{part}`"))?;
                let v = body
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| format!("invalid coordinate `{t}`")))
                    .collect::<Result<Vec<_>, _>>()?;
                if v.len() != 4 {
                    return Err(format!("rectangle needs 4 coordinates, got {}", v.len()));
                }
                if v[0] > v[2] || v[1] > v[3] {
                    return Err(format!("rectangle `{part}` has x0 > x1 or y0 > y1"));
                }
                rects.push([v[0], v[1], v[2], v[3]]);
            }
            return Ok(Self::Rectangles(rects));
        }
        Err(format!("expected `all`, `rect ...` or `ids ...`, got `{s}`"))
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Rectangles(rs) => {
                let parts: Vec<String> = rs
                    .iter()
                    .map(|r| format!("rect {} {} {} {}", r[0], r[1], r[2], r[3]))
                    .collect();
                f.write_str(&parts.join("; "))
            }
            Self::Ids(ids) => {
                let parts: Vec<String> = ids.iter().map(usize::to_string).collect();
                write!(f, "ids {}", parts.join(","))
            }
        }
    }
}

impl CellSpec {
    /// Sorted, deduplicated cell indices.
    pub fn resolve(&self, coarse: &CoarseMesh) -> Result<Vec<usize>, String> {
        let n = coarse.num_elements();
        let mut cells: Vec<usize> = match self {
            Self::All => (0..n).collect(),
            Self::Rectangles(rs) => (0..n)
                .filter(|&k| {
                    let c = coarse.element_centroid(k);
                    rs.iter().any(|r| c[0] >= r[0] && c[0] <= r[2] && c[1] >= r[1] && c[1] <= r[3])
                })
                .collect(),
            Self::Ids(ids) => {
                if let Some(&bad) = ids.iter().find(|&&k| k >= n) {
                    return Err(format!("cell id {bad} out of range (mesh has {n} cells)"));
                }
                ids.clone()
            }
        };
        cells.sort_unstable();
        cells.dedup();
        Ok(cells)
    }

    pub fn mask(&self, coarse: &CoarseMesh) -> Result<Vec<bool>, String> {
        let mut mask = vec![false; coarse.num_elements()];
        for k in self.resolve(coarse)? {
            mask[k] = true;
        }
        Ok(mask)
    }
}
