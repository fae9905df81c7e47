//! Frame-to-frame nearest-neighbor pairing of localizations into velocity
//! estimates.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::Localization;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityVector {
    /// Midpoint of the pair, meters.
    pub y: f64,
    pub x: f64,
    /// m/s
    pub vy: f64,
    pub vx: f64,
    /// Frame of the first member of the pair.
    pub frame_index: usize,
    pub distance: f64,
}

impl VelocityVector {
    pub fn speed(&self) -> f64 {
        self.vy.hypot(self.vx)
    }
}

/// Greedy shortest-first matching: all candidate pairs within `max_disp`
/// are sorted by distance and accepted while both endpoints are unused.
pub fn nn_pair_velocities(
    current: &[Localization],
    next: &[Localization],
    dt: f64,
    max_disp: f64,
) -> Result<Vec<VelocityVector>> {
    if !(dt > 0.0) || !(max_disp > 0.0) {
        return Err(Error::Argument(format!(
            "dt and max_disp must be positive, got {dt} and {max_disp}"
        )));
    }
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (a, p) in current.iter().enumerate() {
        for (b, q) in next.iter().enumerate() {
            let d = (q.y - p.y).hypot(q.x - p.x);
            if d <= max_disp {
                cands.push((d, a, b));
            }
        }
    }
    cands.sort_by(|u, v| u.partial_cmp(v).unwrap_or(std::cmp::Ordering::Equal));
    let mut used_a = vec![false; current.len()];
    let mut used_b = vec![false; next.len()];
    let mut out = Vec::new();
    for (d, a, b) in cands {
        if used_a[a] || used_b[b] {
            continue;
        }
        used_a[a] = true;
        used_b[b] = true;
        let (p, q) = (&current[a], &next[b]);
        out.push(VelocityVector {
            y: 0.5 * (p.y + q.y),
            x: 0.5 * (p.x + q.x),
            vy: (q.y - p.y) / dt,
            vx: (q.x - p.x) / dt,
            frame_index: p.frame_index,
            distance: d,
        });
    }
    Ok(out)
}

/// Pairs every consecutive frame of a frame-sorted localization list.
pub fn track_all(locs: &[Localization], dt: f64, max_disp: f64) -> Result<Vec<VelocityVector>> {
    let Some(last) = locs.iter().map(|l| l.frame_index).max() else {
        return Ok(Vec::new());
    };
    let mut by_frame: Vec<Vec<Localization>> = vec![Vec::new(); last + 1];
    for l in locs {
        by_frame[l.frame_index].push(*l);
    }
    let mut out = Vec::new();
    for w in by_frame.windows(2) {
        out.extend(nn_pair_velocities(&w[0], &w[1], dt, max_disp)?);
    }
    Ok(out)
}

pub fn write_velocity_csv(vels: &[VelocityVector], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "frame,y_m,x_m,vy_mps,vx_mps").unwrap();
    for v in vels {
        writeln!(buf, "{},{},{},{},{}", v.frame_index, v.y, v.x, v.vy, v.vx).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
