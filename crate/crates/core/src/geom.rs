//! Axis-aligned boxes in image coordinates.

/// Center-based bounding box. `x` grows right, `y` grows down, and `(cx, cy)`
/// is the box center in pixels; `w`/`h` are full extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoundingBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    /// From the corner convention `(x, y, w, h)` where `(x, y)` is top-left.
    pub fn from_corner(x: f32, y: f32, w: f32, h: f32) -> Self {
        BoundingBox { cx: x + w / 2.0, cy: y + h / 2.0, w, h }
    }

    /// Top-left corner.
    pub fn corner(&self) -> (f32, f32) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0)
    }

    pub fn left(&self) -> f32 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f32 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f32 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f32 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Longest side; the search window is sized from this.
    pub fn max_side(&self) -> f32 {
        self.w.max(self.h)
    }

    /// True when the box has no positive extent.
    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    /// Same center, extents multiplied by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        BoundingBox { cx: self.cx, cy: self.cy, w: self.w * s, h: self.h * s }
    }

    pub fn shifted(&self, dx: f32, dy: f32) -> Self {
        BoundingBox { cx: self.cx + dx, cy: self.cy + dy, w: self.w, h: self.h }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_center_roundtrip() {
        let b = BoundingBox::from_corner(10.0, 20.0, 30.0, 40.0);
        assert_eq!((b.cx, b.cy), (25.0, 40.0));
        assert_eq!(b.corner(), (10.0, 20.0));
        assert_eq!(b.area(), 1200.0);
        assert_eq!(b.max_side(), 40.0);
    }

    #[test]
    fn degenerate_detection() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_degenerate());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, -1.0).is_degenerate());
        assert!(!BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_degenerate());
    }

    #[test]
    fn scale_and_shift() {
        let b = BoundingBox::new(10.0, 10.0, 4.0, 8.0).scaled(1.5).shifted(1.0, -2.0);
        assert_eq!((b.cx, b.cy, b.w, b.h), (11.0, 8.0, 6.0, 12.0));
    }
}
