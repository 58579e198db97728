//! Filled 2-D glyphs and a point-sampling rasterizer.

/// A continuous-space point; `x` is the column axis, `y` the row axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    fn sub(self, o: Point) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse {
        center: Point,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rect {
        center: Point,
        hw: f64,
        hh: f64,
        angle: f64,
    },
    Triangle([Point; 3]),
    /// Union of shapes; its analytic center is the mean of the members' centers.
    Group(Vec<Shape>),
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Shape::Ellipse { center, rx, ry, angle } => {
                let q = p.sub(*center).rotate(-angle);
                (q.x / rx).powi(2) + (q.y / ry).powi(2) <= 1.0
            }
            Shape::Rect { center, hw, hh, angle } => {
                let q = p.sub(*center).rotate(-angle);
                q.x.abs() <= *hw && q.y.abs() <= *hh
            }
            Shape::Triangle([a, b, c]) => {
                let cross = |o: Point, u: Point, v: Point| (u.x - o.x) * (v.y - o.y) - (u.y - o.y) * (v.x - o.x);
                let d1 = cross(*a, *b, p);
                let d2 = cross(*b, *c, p);
                let d3 = cross(*c, *a, p);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Group(items) => items.iter().any(|s| s.contains(p)),
        }
    }

    /// Analytic center used as the part annotation.
    pub fn center(&self) -> Point {
        match self {
            Shape::Ellipse { center, .. } | Shape::Rect { center, .. } => *center,
            Shape::Triangle([a, b, c]) => Point::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0),
            Shape::Group(items) => {
                let n = items.len() as f64;
                let (sx, sy) = items.iter().map(Shape::center).fold((0.0, 0.0), |(sx, sy), c| (sx + c.x, sy + c.y));
                Point::new(sx / n, sy / n)
            }
        }
    }

    /// Pixels whose centers fall inside the shape.
    pub fn raster_mask(&self, width: usize, height: usize) -> Vec<bool> {
        let mut mask = vec![false; width * height];
        for r in 0..height {
            for c in 0..width {
                mask[r * width + c] = self.contains(Point::new(c as f64 + 0.5, r as f64 + 0.5));
            }
        }
        mask
    }

    /// Mean pixel-center position of the rasterized shape.
    pub fn raster_centroid(&self, width: usize, height: usize) -> Option<Point> {
        let mask = self.raster_mask(width, height);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                sx += (i % width) as f64 + 0.5;
                sy += (i / width) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
    }
}

/// RGB float canvas, channel-major.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0.0; 3 * width * height] }
    }

    pub fn set(&mut self, r: usize, c: usize, color: [f64; 3]) {
        let plane = self.width * self.height;
        for (ch, v) in color.iter().enumerate() {
            self.rgb[ch * plane + r * self.width + c] = *v;
        }
    }

    pub fn fill(&mut self, shape: &Shape, color: [f64; 3]) {
        let mask = shape.raster_mask(self.width, self.height);
        for (i, m) in mask.into_iter().enumerate() {
            if m {
                self.set(i / self.width, i % self.width, color);
            }
        }
    }

    /// Quantize to 8 bits, channel-major.
    pub fn to_u8(&self) -> Vec<u8> {
        self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_contains_its_centroid() {
        let t = Shape::Triangle([Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(0.0, 10.0)]);
        assert!(t.contains(t.center()));
        assert!(!t.contains(Point::new(9.0, 9.0)));
    }

    #[test]
    fn rotated_rect_raster_centroid_is_center() {
        let r = Shape::Rect { center: Point::new(20.3, 15.7), hw: 5.0, hh: 2.0, angle: 0.4 };
        let c = r.raster_centroid(40, 40).unwrap();
        assert!((c.x - 20.3).abs() < 0.5 && (c.y - 15.7).abs() < 0.5);
    }
}
