//! Connected components, outer-boundary tracing and polygon simplification.
//!
//! The boundary of a pixel set is traced along pixel edges ("crack"
//! following), so a single pixel yields its unit square. The closed contour
//! is then simplified with Ramer-Douglas-Peucker, run separately on the four
//! chains between the contour's extreme points. Anchoring on extremes keeps
//! a rectangle at exactly its 4 corners no matter where it sits.

use crate::data_model::Raster;
use crate::error::{Error, Result};

/// Default RDP tolerance in pixels.
pub const DEFAULT_EPSILON: f64 = 1.0;

/// 8-connected components of the nonzero pixels, each as a list of `(row, col)`
/// in scan order. Components are ordered by their first pixel in scan order.
pub fn components_8(mask: &Raster<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.as_slice()[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && mask.as_slice()[j] != 0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Lattice point `(y, x)` on pixel corners; pixel `(r, c)` spans `[r, r+1] x [c, c+1]`.
pub type Corner = (i64, i64);

/// Outer boundary of the component containing the first nonzero pixel of
/// `mask` (scan order), as corner points in clockwise screen order, starting
/// at that pixel's top-left corner. Every lattice point on the boundary is
/// included.
pub fn trace_outer_boundary(mask: &Raster<u8>) -> Result<Vec<Corner>> {
    let (h, w) = mask.shape();
    let first = mask
        .as_slice()
        .iter()
        .position(|&v| v != 0)
        .ok_or_else(|| Error::invalid("cannot trace an empty mask"))?;
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask.get(r as usize, c as usize) != 0;
    let start: Corner = ((first / w) as i64, (first % w) as i64);
    // direction as (dy, dx); start heading east with the object on the right
    let (mut dy, mut dx) = (0i64, 1i64);
    let mut pos = start;
    let mut out = Vec::new();
    loop {
        out.push(pos);
        pos = (pos.0 + dy, pos.1 + dx);
        if pos == start {
            break;
        }
        let (fl, fr) = ahead_pixels(pos, (dy, dx));
        if inside(fl.0, fl.1) {
            // turn left
            (dy, dx) = (-dx, dy);
        } else if !inside(fr.0, fr.1) {
            // turn right
            (dy, dx) = (dx, -dy);
        }
    }
    Ok(out)
}

/// The two pixels in front of corner `p` when heading `d`: (front-left, front-right).
fn ahead_pixels(p: Corner, d: (i64, i64)) -> ((i64, i64), (i64, i64)) {
    let (y, x) = p;
    let nw = (y - 1, x - 1);
    let ne = (y - 1, x);
    let sw = (y, x - 1);
    let se = (y, x);
    match d {
        (0, 1) => (ne, se),
        (1, 0) => (se, sw),
        (0, -1) => (sw, nw),
        (-1, 0) => (nw, ne),
        _ => unreachable!("unit axis direction"),
    }
}

fn perp_distance(p: Corner, a: Corner, b: Corner) -> f64 {
    let (py, px) = (p.0 as f64, p.1 as f64);
    let (ay, ax) = (a.0 as f64, a.1 as f64);
    let (by, bx) = (b.0 as f64, b.1 as f64);
    let (vy, vx) = (by - ay, bx - ax);
    let len = (vy * vy + vx * vx).sqrt();
    if len == 0.0 {
        return ((py - ay).powi(2) + (px - ax).powi(2)).sqrt();
    }
    ((px - ax) * vy - (py - ay) * vx).abs() / len
}

/// Ramer-Douglas-Peucker on an open chain; both endpoints are kept.
pub fn rdp(chain: &[Corner], epsilon: f64) -> Vec<Corner> {
    if chain.len() < 3 {
        return chain.to_vec();
    }
    let (a, b) = (chain[0], chain[chain.len() - 1]);
    let (mut best, mut dmax) = (0, 0.0);
    for (i, &p) in chain.iter().enumerate().take(chain.len() - 1).skip(1) {
        let d = perp_distance(p, a, b);
        if d > dmax {
            dmax = d;
            best = i;
        }
    }
    if dmax > epsilon {
        let mut left = rdp(&chain[..=best], epsilon);
        let right = rdp(&chain[best..], epsilon);
        left.pop();
        left.extend(right);
        left
    } else {
        vec![a, b]
    }
}

/// Indices of the four extreme contour points: top (min row, then min col),
/// right (max col, then min row), bottom (max row, then max col),
/// left (min col, then max row).
fn extreme_indices(contour: &[Corner]) -> [usize; 4] {
    let pick = |key: &dyn Fn(&Corner) -> (i64, i64)| {
        (0..contour.len())
            .min_by_key(|&i| key(&contour[i]))
            .expect("non-empty contour")
    };
    [
        pick(&|p| (p.0, p.1)),
        pick(&|p| (-p.1, p.0)),
        pick(&|p| (-p.0, -p.1)),
        pick(&|p| (p.1, -p.0)),
    ]
}

/// Closed-contour simplification anchored at the extreme points.
pub fn simplify_closed(contour: &[Corner], epsilon: f64) -> Vec<Corner> {
    let n = contour.len();
    let mut anchors = extreme_indices(contour).to_vec();
    anchors.sort_unstable();
    anchors.dedup();
    if anchors.len() == 1 {
        return vec![contour[anchors[0]]];
    }
    let mut out = Vec::new();
    for k in 0..anchors.len() {
        let (s, e) = (anchors[k], anchors[(k + 1) % anchors.len()]);
        let chain: Vec<Corner> = if e > s {
            contour[s..=e].to_vec()
        } else {
            contour[s..].iter().chain(&contour[..=e]).copied().collect()
        };
        let mut simp = rdp(&chain, epsilon);
        simp.pop();
        out.extend(simp);
    }
    debug_assert!(out.len() <= n);
    out
}

/// Vertices of the simplified outer polygon of a component mask, at least 3.
pub fn polygon_vertex_count(mask: &Raster<u8>, epsilon: f64) -> Result<usize> {
    let contour = trace_outer_boundary(mask)?;
    Ok(simplify_closed(&contour, epsilon).len().max(3))
}
