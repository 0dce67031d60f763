//! Images, rectangles, masks and patch placements.
//!
//! Pixels are small unsigned integers drawn from an explicit alphabet
//! `0..alphabet`. A mask is a union of rectangles on the spatial plane; a
//! masked location is zeroed across every channel.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported alphabet; pixels are stored as bytes.
pub const MAX_ALPHABET: u16 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("invalid image shape {height}x{width}x{channels}")]
    InvalidShape {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("alphabet size {0} outside 1..=256")]
    InvalidAlphabet(u16),
    #[error("expected {expected} pixels, got {actual}")]
    PixelCount { expected: usize, actual: usize },
    #[error("pixel value {value} outside alphabet of size {alphabet}")]
    PixelOutOfAlphabet { value: u8, alphabet: u16 },
    #[error("plane mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("rect {rect} does not fit inside a {height}x{width} plane")]
    RectOutOfPlane {
        rect: Rect,
        height: usize,
        width: usize,
    },
    #[error("rect has zero extent")]
    EmptyRect,
    #[error("mask needs at least one rect")]
    EmptyMask,
    #[error("placement needs at least one rect")]
    EmptyPlacement,
    #[error("placement rects {0} and {1} overlap")]
    OverlappingRects(Rect, Rect),
    #[error("patch content has {actual} values, placement needs {expected}")]
    ContentLength { expected: usize, actual: usize },
}

/// A dense `height x width x channels` image, row-major with channels
/// innermost.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    alphabet: u16,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        alphabet: u16,
        pixels: Vec<u8>,
    ) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::InvalidShape {
                height,
                width,
                channels,
            });
        }
        if alphabet == 0 || alphabet > MAX_ALPHABET {
            return Err(TensorError::InvalidAlphabet(alphabet));
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(TensorError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        if let Some(&value) = pixels.iter().find(|&&v| u16::from(v) >= alphabet) {
            return Err(TensorError::PixelOutOfAlphabet { value, alphabet });
        }
        Ok(Self {
            height,
            width,
            channels,
            alphabet,
            pixels,
        })
    }

    /// All-zero image.
    pub fn zeros(
        height: usize,
        width: usize,
        channels: usize,
        alphabet: u16,
    ) -> Result<Self, TensorError> {
        Self::new(
            height,
            width,
            channels,
            alphabet,
            vec![0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alphabet(&self) -> u16 {
        self.alphabet
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[self.offset(y, x) + c]
    }

    #[inline]
    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    fn check_plane(&self, plane: (usize, usize)) -> Result<(), TensorError> {
        if plane != self.plane() {
            return Err(TensorError::DimensionMismatch {
                expected: self.plane(),
                actual: plane,
            });
        }
        Ok(())
    }
}

/// Axis-aligned rectangle on the spatial plane. Serialized as
/// `[top, left, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<(), TensorError> {
        if self.height == 0 || self.width == 0 {
            return Err(TensorError::EmptyRect);
        }
        if self.bottom() > height || self.right() > width {
            return Err(TensorError::RectOutOfPlane {
                rect: *self,
                height,
                width,
            });
        }
        Ok(())
    }

    /// Pixel coordinates in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.bottom()).flat_map(move |y| (self.left..self.right()).map(move |x| (y, x)))
    }
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.top, r.left, r.height, r.width]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{} {}x{})",
            self.top, self.left, self.height, self.width
        )
    }
}

/// A binary spatial mask stored as a union of rectangles.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    plane_height: usize,
    plane_width: usize,
    rects: Vec<Rect>,
}

impl Mask {
    pub fn new(plane_height: usize, plane_width: usize, rects: Vec<Rect>) -> Result<Self, TensorError> {
        if rects.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        for r in &rects {
            r.check_inside(plane_height, plane_width)?;
        }
        Ok(Self {
            plane_height,
            plane_width,
            rects,
        })
    }

    pub fn full(plane_height: usize, plane_width: usize) -> Result<Self, TensorError> {
        Self::new(
            plane_height,
            plane_width,
            vec![Rect::new(0, 0, plane_height, plane_width)],
        )
    }

    /// Union of several masks on the same plane.
    pub fn union<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Self, TensorError> {
        let mut iter = masks.into_iter();
        let first = iter.next().ok_or(TensorError::EmptyMask)?;
        let mut rects = first.rects.clone();
        for m in iter {
            if m.plane() != first.plane() {
                return Err(TensorError::DimensionMismatch {
                    expected: first.plane(),
                    actual: m.plane(),
                });
            }
            rects.extend_from_slice(&m.rects);
        }
        Ok(Self {
            plane_height: first.plane_height,
            plane_width: first.plane_width,
            rects,
        })
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.plane_height, self.plane_width)
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.rects.iter().any(|r| r.contains(y, x))
    }

    /// Row-major membership matrix.
    pub fn bitmap(&self) -> Vec<bool> {
        let mut bits = vec![false; self.plane_height * self.plane_width];
        for r in &self.rects {
            for (y, x) in r.cells() {
                bits[y * self.plane_width + x] = true;
            }
        }
        bits
    }

    /// Number of 1-elements.
    pub fn ones(&self) -> usize {
        self.bitmap().into_iter().filter(|&b| b).count()
    }
}

/// The threat model: which patch regions an attacker may rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchKind {
    /// Any `size x size` square.
    Square { size: usize },
    /// Any axis-aligned rectangle with `height * width <= area`.
    Rectangle { area: usize },
    /// `count` mutually disjoint `size x size` squares.
    Multi { count: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub plane: (usize, usize),
    #[serde(flatten)]
    pub kind: PatchKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid patch spec: {0}")]
pub struct PatchSpecError(pub String);

impl PatchSpec {
    pub fn square(plane: (usize, usize), size: usize) -> Result<Self, PatchSpecError> {
        Self::new(plane, PatchKind::Square { size })
    }

    pub fn rectangle(plane: (usize, usize), area: usize) -> Result<Self, PatchSpecError> {
        Self::new(plane, PatchKind::Rectangle { area })
    }

    pub fn multi(plane: (usize, usize), count: usize, size: usize) -> Result<Self, PatchSpecError> {
        Self::new(plane, PatchKind::Multi { count, size })
    }

    pub fn new(plane: (usize, usize), kind: PatchKind) -> Result<Self, PatchSpecError> {
        let spec = Self { plane, kind };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PatchSpecError> {
        let (h, w) = self.plane;
        if h == 0 || w == 0 {
            return Err(PatchSpecError(format!("empty plane {h}x{w}")));
        }
        match self.kind {
            PatchKind::Square { size } => {
                if size == 0 || size > h.min(w) {
                    return Err(PatchSpecError(format!(
                        "square size {size} outside 1..={}",
                        h.min(w)
                    )));
                }
            }
            PatchKind::Rectangle { area } => {
                if area == 0 || area > h * w {
                    return Err(PatchSpecError(format!(
                        "rectangle area {area} outside 1..={}",
                        h * w
                    )));
                }
            }
            PatchKind::Multi { count, size } => {
                if count == 0 {
                    return Err(PatchSpecError("multi-patch count must be >= 1".into()));
                }
                if size == 0 || size > h.min(w) {
                    return Err(PatchSpecError(format!(
                        "square size {size} outside 1..={}",
                        h.min(w)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A concrete patch location: one rect per patch, mutually disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(pub Vec<Rect>);

impl Placement {
    pub fn single(rect: Rect) -> Self {
        Self(vec![rect])
    }

    pub fn rects(&self) -> &[Rect] {
        &self.0
    }

    /// Number of spatial cells rewritten by this placement.
    pub fn cell_count(&self) -> usize {
        self.0.iter().map(Rect::area).sum()
    }

    pub fn check(&self, height: usize, width: usize) -> Result<(), TensorError> {
        if self.0.is_empty() {
            return Err(TensorError::EmptyPlacement);
        }
        for r in &self.0 {
            r.check_inside(height, width)?;
        }
        for (i, a) in self.0.iter().enumerate() {
            for b in &self.0[i + 1..] {
                if a.intersects(b) {
                    return Err(TensorError::OverlappingRects(*a, *b));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Zero every channel of every masked location: `(J - m) ⊙ x`.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image, TensorError> {
    image.check_plane(mask.plane())?;
    let mut out = image.clone();
    let c = image.channels;
    for r in &mask.rects {
        for y in r.top..r.bottom() {
            let start = out.offset(y, r.left);
            out.pixels[start..start + r.width * c].fill(0);
        }
    }
    Ok(out)
}

/// Overwrite the placement with `content`, consumed rect by rect in
/// row-major order with channels innermost.
pub fn apply_patch(image: &Image, placement: &Placement, content: &[u8]) -> Result<Image, TensorError> {
    placement.check(image.height, image.width)?;
    let c = image.channels;
    let expected = placement.cell_count() * c;
    if content.len() != expected {
        return Err(TensorError::ContentLength {
            expected,
            actual: content.len(),
        });
    }
    if let Some(&value) = content.iter().find(|&&v| u16::from(v) >= image.alphabet) {
        return Err(TensorError::PixelOutOfAlphabet {
            value,
            alphabet: image.alphabet,
        });
    }
    let mut out = image.clone();
    let mut cursor = 0;
    for r in placement.rects() {
        for y in r.top..r.bottom() {
            let start = out.offset(y, r.left);
            let len = r.width * c;
            out.pixels[start..start + len].copy_from_slice(&content[cursor..cursor + len]);
            cursor += len;
        }
    }
    Ok(out)
}

/// `p ⊙ m == p`: every placement cell is a 1-element of the mask.
pub fn mask_covers(mask: &Mask, placement: &Placement) -> Result<bool, TensorError> {
    let (h, w) = mask.plane();
    for r in placement.rects() {
        r.check_inside(h, w)?;
    }
    Ok(placement
        .rects()
        .iter()
        .all(|r| r.cells().all(|(y, x)| mask.contains(y, x))))
}
