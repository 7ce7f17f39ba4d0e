//! Builds the object-guided attention mask for a small scene and prints which
//! patches each patch may attend to.
//!
//! cargo run --example object_masks

use omg_fuser::{build_oga_mask, build_patch_object_sets, SegmentationMapSet};

fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<bool> {
    (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
}

fn main() -> omg_fuser::Result<()> {
    let (h, w, p) = (16, 16, 4);
    // two overlapping boxes; the rest of the image is background
    let seg = SegmentationMapSet::new(h, w, vec![rect(h, w, 0, 0, 8, 8), rect(h, w, 6, 6, 12, 12)])?;
    let sets = build_patch_object_sets(&seg, p)?;
    let mask = build_oga_mask(&sets)?;
    let g = w / p;
    println!("objects per patch (id {} is background):", seg.background_id());
    for r in 0..h / p {
        let row: Vec<String> = (0..g).map(|c| format!("{:?}", sets.sets[r * g + c])).collect();
        println!("  {}", row.join(" "));
    }
    println!("\nallowed attention ({} of {} pairs blocked):", (mask.blocked_fraction() * (mask.len() * mask.len()) as f64).round(), mask.len() * mask.len());
    for u in 0..mask.len() {
        let row: String = (0..mask.len()).map(|v| if mask.allowed(u, v) { '#' } else { '.' }).collect();
        println!("  {u:>2} {row}");
    }
    Ok(())
}
