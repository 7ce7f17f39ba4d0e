//! Instance maps, per-patch object sets and the object-guided attention mask.

use omg_tensor::{Real, BLOCKED};

use crate::error::{Error, Result};

/// K binary instance maps over an `H x W` image. Maps may overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMapSet {
    pub height: usize,
    pub width: usize,
    /// Row-major `H * W` masks, one per instance.
    pub maps: Vec<Vec<bool>>,
    /// Treat pixels covered by no map as one extra background object.
    pub background: bool,
}

impl SegmentationMapSet {
    pub fn new(height: usize, width: usize, maps: Vec<Vec<bool>>) -> Result<Self> {
        for (i, m) in maps.iter().enumerate() {
            if m.len() != height * width {
                return Err(Error::Dimension(format!("map {i} has {} pixels, expected {height}x{width}", m.len())));
            }
        }
        Ok(SegmentationMapSet { height, width, maps, background: true })
    }

    /// Builds instance maps from a label image: 0 is unannotated, `k >= 1` is instance `k`.
    pub fn from_labels(height: usize, width: usize, labels: &[u16]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!("label map has {} pixels, expected {height}x{width}", labels.len())));
        }
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut maps = vec![vec![false; height * width]; k];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                maps[l as usize - 1][i] = true;
            }
        }
        // drop ids that never occur
        maps.retain(|m| m.iter().any(|&b| b));
        Self::new(height, width, maps)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Id used for the background object.
    pub fn background_id(&self) -> u32 {
        self.maps.len() as u32
    }

    /// Object ids present at pixel `(y, x)`, background included.
    pub fn objects_at(&self, y: usize, x: usize) -> Vec<u32> {
        let i = y * self.width + x;
        let mut ids: Vec<u32> = (0..self.maps.len()).filter(|&k| self.maps[k][i]).map(|k| k as u32).collect();
        if ids.is_empty() && self.background {
            ids.push(self.background_id());
        }
        ids
    }
}

/// Object-id set per patch, in raster order over the `H/p x W/p` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchObjectSets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// Sorted, deduplicated ids.
    pub sets: Vec<Vec<u32>>,
}

impl PatchObjectSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// An object id belongs to a patch's set iff at least one pixel of the patch carries it.
pub fn build_patch_object_sets(seg: &SegmentationMapSet, p: usize) -> Result<PatchObjectSets> {
    if p == 0 || seg.height % p != 0 || seg.width % p != 0 {
        return Err(Error::Dimension(format!("patch size {p} does not divide {}x{}", seg.height, seg.width)));
    }
    let (gh, gw) = (seg.height / p, seg.width / p);
    let k = seg.maps.len();
    let mut present = vec![vec![false; k + 1]; gh * gw];
    for y in 0..seg.height {
        for x in 0..seg.width {
            let u = (y / p) * gw + x / p;
            let i = y * seg.width + x;
            let mut covered = false;
            for (j, m) in seg.maps.iter().enumerate() {
                if m[i] {
                    present[u][j] = true;
                    covered = true;
                }
            }
            if !covered && seg.background {
                present[u][k] = true;
            }
        }
    }
    let sets = present.into_iter().map(|row| row.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j as u32).collect()).collect();
    Ok(PatchObjectSets { grid_h: gh, grid_w: gw, patch: p, sets })
}

/// `L x L` attention mask: patches attend to each other iff they share an object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OgaMask {
    len: usize,
    allowed: Vec<bool>,
}

impl OgaMask {
    pub fn from_allowed(len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::Dimension(format!("mask has {} entries, expected {len}x{len}", allowed.len())));
        }
        for u in 0..len {
            if !allowed[u * len + u] {
                return Err(Error::Invariant(format!("mask row {u} blocks its own diagonal")));
            }
        }
        Ok(OgaMask { len, allowed })
    }

    /// Every patch attends to every other.
    pub fn full(len: usize) -> Self {
        OgaMask { len, allowed: vec![true; len * len] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, u: usize, v: usize) -> bool {
        self.allowed[u * self.len + v]
    }

    /// The additive entry: 0 or [`BLOCKED`].
    pub fn entry(&self, u: usize, v: usize) -> f64 {
        if self.allowed(u, v) {
            0.0
        } else {
            BLOCKED
        }
    }

    /// Appends the additive values in row-major order.
    pub fn extend_additive<T: Real>(&self, out: &mut Vec<T>) {
        let blocked = T::lit(BLOCKED);
        out.extend(self.allowed.iter().map(|&a| if a { T::zero() } else { blocked }));
    }

    pub fn additive<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.allowed.len());
        self.extend_additive(&mut out);
        out
    }

    pub fn blocked_fraction(&self) -> f64 {
        self.allowed.iter().filter(|&&a| !a).count() as f64 / self.allowed.len().max(1) as f64
    }
}

fn intersects(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

pub fn build_oga_mask(sets: &PatchObjectSets) -> Result<OgaMask> {
    let l = sets.sets.len();
    if let Some(u) = sets.sets.iter().position(|s| s.is_empty()) {
        return Err(Error::Invariant(format!("patch {u} has an empty object set")));
    }
    let mut allowed = vec![false; l * l];
    for u in 0..l {
        allowed[u * l + u] = true;
        for v in u + 1..l {
            let a = intersects(&sets.sets[u], &sets.sets[v]);
            allowed[u * l + v] = a;
            allowed[v * l + u] = a;
        }
    }
    Ok(OgaMask { len: l, allowed })
}

/// Convenience: sets then mask.
pub fn oga_mask_for(seg: &SegmentationMapSet, p: usize) -> Result<OgaMask> {
    build_oga_mask(&build_patch_object_sets(seg, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<bool> {
        (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
    }

    #[test]
    fn background_only() {
        let seg = SegmentationMapSet::new(4, 4, vec![]).unwrap();
        let s = build_patch_object_sets(&seg, 2).unwrap();
        assert_eq!(s.sets, vec![vec![0]; 4]);
        let m = build_oga_mask(&s).unwrap();
        assert_eq!(m.blocked_fraction(), 0.0);
    }

    #[test]
    fn full_cover_has_no_background() {
        let seg = SegmentationMapSet::new(4, 4, vec![vec![true; 16]]).unwrap();
        let s = build_patch_object_sets(&seg, 2).unwrap();
        assert_eq!(s.sets, vec![vec![0]; 4]);
    }

    #[test]
    fn two_objects_on_a_two_by_two_grid() {
        // A covers patches 0 and 1, B covers patch 1 and the top half of patch 3
        let a = rect(4, 4, 0, 2, 0, 4);
        let b = rect(4, 4, 0, 3, 2, 4);
        let seg = SegmentationMapSet::new(4, 4, vec![a, b]).unwrap();
        let s = build_patch_object_sets(&seg, 2).unwrap();
        assert_eq!(s.sets, vec![vec![0], vec![0, 1], vec![2], vec![1, 2]]);
        let m = build_oga_mask(&s).unwrap();
        assert!(m.allowed(0, 1) && !m.allowed(0, 2) && !m.allowed(0, 3));
        assert!(m.allowed(1, 3) && m.allowed(2, 3) && !m.allowed(1, 2));
    }

    #[test]
    fn disjoint_groups_are_block_diagonal() {
        let seg = SegmentationMapSet::new(2, 4, vec![rect(2, 4, 0, 2, 0, 2)]).unwrap();
        let m = oga_mask_for(&seg, 1).unwrap();
        // patches 0,1,4,5 are object A; 2,3,6,7 background
        for u in 0..8 {
            for v in 0..8 {
                assert_eq!(m.allowed(u, v), (u % 4 < 2) == (v % 4 < 2));
            }
        }
        assert_eq!(m.entry(0, 2), BLOCKED);
        assert_eq!(m.entry(0, 1), 0.0);
    }

    #[test]
    fn unique_objects_give_identity_pattern() {
        let maps = (0..4).map(|k| rect(2, 2, k / 2, k / 2 + 1, k % 2, k % 2 + 1)).collect();
        let m = oga_mask_for(&SegmentationMapSet::new(2, 2, maps).unwrap(), 1).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                assert_eq!(m.allowed(u, v), u == v);
            }
        }
    }

    #[test]
    fn errors() {
        let seg = SegmentationMapSet::new(4, 4, vec![]).unwrap();
        assert!(matches!(build_patch_object_sets(&seg, 3), Err(Error::Dimension(_))));
        let mut seg = SegmentationMapSet::new(2, 2, vec![rect(2, 2, 0, 1, 0, 2)]).unwrap();
        seg.background = false;
        let s = build_patch_object_sets(&seg, 1).unwrap();
        assert!(matches!(build_oga_mask(&s), Err(Error::Invariant(_))));
        assert!(SegmentationMapSet::new(2, 2, vec![vec![true; 3]]).is_err());
    }

    #[test]
    fn label_map_ingestion() {
        let labels = [0u16, 1, 1, 3];
        let seg = SegmentationMapSet::from_labels(2, 2, &labels).unwrap();
        assert_eq!(seg.len(), 2);
        assert_eq!(seg.objects_at(0, 0), vec![2]);
        assert_eq!(seg.objects_at(1, 1), vec![1]);
    }
}
