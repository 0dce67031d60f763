//! Covering mask sets.
//!
//! A mask set covers a threat model when every legal patch placement lies
//! entirely inside at least one mask. Square covers use a strided window
//! per axis; rectangle covers union several such windows; multi-patch covers
//! union every `t`-combination of a single-patch cover. [`verify_cover`]
//! checks the property by brute force and is the ground truth for all of
//! the generators.

use serde::Serialize;
use thiserror::Error;

use crate::exec::{self, Parallelism};
use crate::tensor::{Mask, PatchKind, PatchSpec, Placement, Rect};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoverError {
    #[error("patch size {patch} does not fit a plane axis of length {axis}")]
    PatchTooLarge { patch: usize, axis: usize },
    #[error("masks per axis must be >= 1")]
    ZeroMasksPerAxis,
    #[error("{masks} masks per axis exceeds the {anchors} patch anchors on an axis of length {axis}")]
    TooManyMasks {
        masks: usize,
        anchors: usize,
        axis: usize,
    },
    #[error("mask extent {extent} is smaller than patch size {patch}")]
    Degenerate { extent: usize, patch: usize },
    #[error("area budget {area} outside 1..={max}")]
    AreaBudget { area: usize, max: usize },
    #[error("patch count {count} must be between 1 and the base set size {base}")]
    PatchCount { count: usize, base: usize },
    #[error("multi-patch covers need a square base cover")]
    NonSquareBase,
    #[error(transparent)]
    Spec(#[from] crate::tensor::PatchSpecError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// An ordered collection of masks together with the threat model it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
    pub spec: PatchSpec,
    pub masks_per_axis: usize,
    /// Each mask is a union built for a multi-patch threat model.
    pub compound: bool,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn plane(&self) -> (usize, usize) {
        self.spec.plane
    }

    /// A copy without the mask at `index`.
    pub fn without(&self, index: usize) -> MaskSet {
        let mut out = self.clone();
        out.masks.remove(index);
        out
    }
}

/// Per-axis stride window: `s = ceil((n - p + 1) / k)`, extent
/// `m = p - 1 + s`, anchors `0, s, 2s, ..` clamped to `n - m` and
/// terminated by `n - m`.
pub fn axis_windows(n: usize, p: usize, k: usize) -> Result<(Vec<usize>, usize), CoverError> {
    if k == 0 {
        return Err(CoverError::ZeroMasksPerAxis);
    }
    if p == 0 || p > n {
        return Err(CoverError::PatchTooLarge { patch: p, axis: n });
    }
    let anchors_total = n - p + 1;
    let stride = anchors_total.div_ceil(k);
    let extent = p - 1 + stride;
    if extent < p {
        return Err(CoverError::Degenerate { extent, patch: p });
    }
    let last = n - extent;
    let mut anchors: Vec<usize> = (0..k.saturating_sub(1))
        .map(|i| (i * stride).min(last))
        .collect();
    anchors.push(last);
    anchors.dedup();
    Ok((anchors, extent))
}

fn product_masks(
    plane: (usize, usize),
    (ys, mh): (&[usize], usize),
    (xs, mw): (&[usize], usize),
) -> Result<Vec<Mask>, CoverError> {
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in ys {
        for &x in xs {
            out.push(Mask::new(plane.0, plane.1, vec![Rect::new(y, x, mh, mw)])?);
        }
    }
    Ok(out)
}

/// Cover every `patch_size x patch_size` placement on the plane with
/// `masks_per_axis^2` (or fewer, on short axes) rectangular masks.
pub fn gen_square_cover(
    plane: (usize, usize),
    patch_size: usize,
    masks_per_axis: usize,
) -> Result<MaskSet, CoverError> {
    let spec = PatchSpec::square(plane, patch_size).map_err(|_| CoverError::PatchTooLarge {
        patch: patch_size,
        axis: plane.0.min(plane.1),
    })?;
    if masks_per_axis == 0 {
        return Err(CoverError::ZeroMasksPerAxis);
    }
    for axis in [plane.0, plane.1] {
        let anchors = axis - patch_size + 1;
        if masks_per_axis > 1 && masks_per_axis > anchors {
            return Err(CoverError::TooManyMasks {
                masks: masks_per_axis,
                anchors,
                axis,
            });
        }
    }
    let (ys, mh) = axis_windows(plane.0, patch_size, masks_per_axis)?;
    let (xs, mw) = axis_windows(plane.1, patch_size, masks_per_axis)?;
    Ok(MaskSet {
        masks: product_masks(plane, (&ys, mh), (&xs, mw))?,
        spec,
        masks_per_axis,
        compound: false,
    })
}

/// Shape buckets `(patch_height, patch_width)` whose windows together
/// dominate every rectangle of area at most `area` on the plane.
pub fn rect_buckets(plane: (usize, usize), area: usize) -> Vec<(usize, usize)> {
    let (h, w) = plane;
    let cap = |(ph, pw): (usize, usize)| (ph.min(h).max(1), pw.min(w).max(1));
    let mut buckets: Vec<(usize, usize)> = Vec::new();
    let push = |b: (usize, usize), buckets: &mut Vec<(usize, usize)>| {
        let b = cap(b);
        if !buckets.contains(&b) {
            buckets.push(b);
        }
    };
    let root = ceil_sqrt(area);
    push((area, 1), &mut buckets);
    push((1, area), &mut buckets);
    push((root, root), &mut buckets);
    let mut ph = area;
    loop {
        push((ph, area.div_ceil(ph)), &mut buckets);
        if ph == 1 {
            break;
        }
        ph = ph.div_ceil(2);
    }
    // The ladder alone misses some shapes (e.g. 4x3 under area 12); fill in
    // any maximal shape that no bucket dominates yet.
    for rh in 1..=area.min(h) {
        let rw = (area / rh).min(w);
        if rw == 0 {
            continue;
        }
        if !buckets.iter().any(|&(bh, bw)| bh >= rh && bw >= rw) {
            push((rh, rw), &mut buckets);
        }
    }
    buckets
}

fn ceil_sqrt(a: usize) -> usize {
    let mut r = (a as f64).sqrt() as usize;
    while r * r < a {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= a {
        r -= 1;
    }
    r
}

/// Cover every axis-aligned rectangle with area at most `area_budget`.
pub fn gen_rect_cover(
    plane: (usize, usize),
    area_budget: usize,
    masks_per_axis: usize,
) -> Result<MaskSet, CoverError> {
    let max = plane.0 * plane.1;
    if area_budget == 0 || area_budget > max {
        return Err(CoverError::AreaBudget {
            area: area_budget,
            max,
        });
    }
    if masks_per_axis == 0 {
        return Err(CoverError::ZeroMasksPerAxis);
    }
    let spec = PatchSpec::rectangle(plane, area_budget)?;
    let mut masks: Vec<Mask> = Vec::new();
    for (ph, pw) in rect_buckets(plane, area_budget) {
        let ky = masks_per_axis.min(plane.0 - ph + 1);
        let kx = masks_per_axis.min(plane.1 - pw + 1);
        let (ys, mh) = axis_windows(plane.0, ph, ky)?;
        let (xs, mw) = axis_windows(plane.1, pw, kx)?;
        for m in product_masks(plane, (&ys, mh), (&xs, mw))? {
            if !masks.contains(&m) {
                masks.push(m);
            }
        }
    }
    Ok(MaskSet {
        masks,
        spec,
        masks_per_axis,
        compound: false,
    })
}

/// All `patch_count`-combinations of `base`, each unioned into one mask.
pub fn gen_multi_cover(base: &MaskSet, patch_count: usize) -> Result<MaskSet, CoverError> {
    if patch_count == 0 || patch_count > base.len() {
        return Err(CoverError::PatchCount {
            count: patch_count,
            base: base.len(),
        });
    }
    if patch_count == 1 {
        return Ok(base.clone());
    }
    let size = match base.spec.kind {
        PatchKind::Square { size } => size,
        _ => return Err(CoverError::NonSquareBase),
    };
    let spec = PatchSpec::multi(base.plane(), patch_count, size)?;
    let mut masks = Vec::new();
    for combo in Combinations::new(base.len(), patch_count) {
        masks.push(Mask::union(combo.iter().map(|&i| &base.masks[i]))?);
    }
    Ok(MaskSet {
        masks,
        spec,
        masks_per_axis: base.masks_per_axis,
        compound: true,
    })
}

/// Lexicographic `k`-subsets of `0..n`.
pub(crate) struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        let current = (k <= n).then(|| (0..k).collect());
        Self { n, current }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}

fn square_placements(plane: (usize, usize), size: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    for top in 0..=plane.0 - size {
        for left in 0..=plane.1 - size {
            out.push(Rect::new(top, left, size, size));
        }
    }
    out
}

/// Every legal placement of `spec`, in lexicographic order.
///
/// Square: row-major by anchor. Rectangle: by `(top, left, height, width)`.
/// Multi: index-increasing tuples of pairwise disjoint square placements.
pub fn placements(spec: &PatchSpec) -> Vec<Placement> {
    let (h, w) = spec.plane;
    match spec.kind {
        PatchKind::Square { size } => square_placements(spec.plane, size)
            .into_iter()
            .map(Placement::single)
            .collect(),
        PatchKind::Rectangle { area } => {
            let mut out = Vec::new();
            for top in 0..h {
                for left in 0..w {
                    for rh in 1..=(h - top) {
                        for rw in 1..=(w - left) {
                            if rh * rw > area {
                                break;
                            }
                            out.push(Placement::single(Rect::new(top, left, rh, rw)));
                        }
                    }
                }
            }
            out
        }
        PatchKind::Multi { count, size } => {
            let singles = square_placements(spec.plane, size);
            Combinations::new(singles.len(), count)
                .filter(|c| {
                    c.iter().enumerate().all(|(i, &a)| {
                        c[i + 1..]
                            .iter()
                            .all(|&b| !singles[a].intersects(&singles[b]))
                    })
                })
                .map(|c| Placement(c.into_iter().map(|i| singles[i]).collect()))
                .collect()
        }
    }
}

/// Number of placements without materializing them (square and multi use
/// closed forms where available).
pub fn placement_count(spec: &PatchSpec) -> usize {
    match spec.kind {
        PatchKind::Square { size } => (spec.plane.0 - size + 1) * (spec.plane.1 - size + 1),
        _ => placements(spec).len(),
    }
}

/// 2-D prefix sums of each mask's bitmap for O(1) rectangle containment.
#[derive(Debug, Clone)]
pub struct CoverageIndex {
    width: usize,
    sums: Vec<Vec<u32>>,
}

impl CoverageIndex {
    pub fn new(set: &MaskSet) -> Self {
        let (h, w) = set.plane();
        let sums = set
            .masks
            .iter()
            .map(|m| {
                let bits = m.bitmap();
                let mut s = vec![0u32; (h + 1) * (w + 1)];
                for y in 0..h {
                    for x in 0..w {
                        s[(y + 1) * (w + 1) + x + 1] = u32::from(bits[y * w + x])
                            + s[y * (w + 1) + x + 1]
                            + s[(y + 1) * (w + 1) + x]
                            - s[y * (w + 1) + x];
                    }
                }
                s
            })
            .collect();
        Self { width: w, sums }
    }

    pub fn mask_count(&self) -> usize {
        self.sums.len()
    }

    fn ones_in(&self, mask: usize, r: &Rect) -> u32 {
        let s = &self.sums[mask];
        let w1 = self.width + 1;
        s[r.bottom() * w1 + r.right()] + s[r.top * w1 + r.left]
            - s[r.top * w1 + r.right()]
            - s[r.bottom() * w1 + r.left]
    }

    pub fn covers(&self, mask: usize, placement: &Placement) -> bool {
        placement
            .rects()
            .iter()
            .all(|r| self.ones_in(mask, r) as usize == r.area())
    }

    /// Indices of all masks covering the placement, ascending.
    pub fn covering_masks(&self, placement: &Placement) -> Vec<usize> {
        (0..self.sums.len())
            .filter(|&m| self.covers(m, placement))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub ok: bool,
    pub placements_checked: u64,
    pub first_uncovered: Option<Placement>,
}

/// Brute-force check that every placement of `set.spec` is covered.
pub fn verify_cover(set: &MaskSet, par: Parallelism) -> CoverageReport {
    let all = placements(&set.spec);
    let index = CoverageIndex::new(set);
    let first = exec::find_first_index(all.len(), par, |i| {
        !(0..index.mask_count()).any(|m| index.covers(m, &all[i]))
    });
    CoverageReport {
        ok: first.is_none(),
        placements_checked: all.len() as u64,
        first_uncovered: first.map(|i| all[i].clone()),
    }
}
