//! Integer rasterization of the synthetic scene primitives. Pixel `(x, y)`
//! is covered when its centre `(x + 0.5, y + 0.5)` lies inside the shape;
//! all tests run in doubled integer coordinates so they are exact.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Rectangle,
    Ellipse,
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Covers `x0 <= x < x0 + w`, `y0 <= y < y0 + h`.
    Rectangle { x0: i64, y0: i64, w: i64, h: i64 },
    /// Axis-aligned, centre and radii in pixel-corner coordinates.
    Ellipse { cx: i64, cy: i64, rx: i64, ry: i64 },
    /// Simple polygon with vertices in pixel-corner coordinates.
    Polygon { vertices: Vec<(i64, i64)> },
}

impl Shape {
    pub fn kind(&self) -> ObjectKind {
        match self {
            Shape::Rectangle { .. } => ObjectKind::Rectangle,
            Shape::Ellipse { .. } => ObjectKind::Ellipse,
            Shape::Polygon { .. } => ObjectKind::Polygon,
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = (2 * x + 1 - 2 * cx, 2 * y + 1 - 2 * cy);
                let (rx2, ry2) = ((2 * rx) * (2 * rx), (2 * ry) * (2 * ry));
                dx * dx * ry2 + dy * dy * rx2 <= rx2 * ry2
            }
            Shape::Polygon { ref vertices } => {
                let (px, py) = (2 * x + 1, 2 * y + 1);
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = (2 * vertices[i].0, 2 * vertices[i].1);
                    let (xj, yj) = (2 * vertices[(i + n - 1) % n].0, 2 * vertices[(i + n - 1) % n].1);
                    // px, py are odd and vertices even, so the ray never hits a vertex
                    if (yi > py) != (yj > py) {
                        let lhs = (px - xi) * (yj - yi);
                        let rhs = (xj - xi) * (py - yi);
                        if (yj > yi && lhs < rhs) || (yj < yi && lhs > rhs) {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// Row-major coverage on a `width x height` canvas.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                out.push(self.contains(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_covers_exact_cells() {
        let r = Shape::Rectangle {
            x0: 1,
            y0: 2,
            w: 3,
            h: 2,
        };
        let cov = r.rasterize(6, 6);
        assert_eq!(cov.iter().filter(|&&c| c).count(), 6);
        assert!(cov[2 * 6 + 1] && cov[3 * 6 + 3] && !cov[4 * 6 + 1]);
    }

    #[test]
    fn polygon_square_matches_rectangle() {
        let p = Shape::Polygon {
            vertices: vec![(1, 1), (5, 1), (5, 4), (1, 4)],
        };
        let r = Shape::Rectangle {
            x0: 1,
            y0: 1,
            w: 4,
            h: 3,
        };
        assert_eq!(p.rasterize(8, 8), r.rasterize(8, 8));
        let reversed = Shape::Polygon {
            vertices: vec![(1, 4), (5, 4), (5, 1), (1, 1)],
        };
        assert_eq!(reversed.rasterize(8, 8), r.rasterize(8, 8));
    }

    #[test]
    fn ellipse_is_symmetric() {
        let e = Shape::Ellipse {
            cx: 8,
            cy: 8,
            rx: 5,
            ry: 3,
        };
        let cov = e.rasterize(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(cov[y * 16 + x], cov[y * 16 + (15 - x)]);
                assert_eq!(cov[y * 16 + x], cov[(15 - y) * 16 + x]);
            }
        }
        assert!(cov[8 * 16 + 8] && !cov[0]);
    }
}
