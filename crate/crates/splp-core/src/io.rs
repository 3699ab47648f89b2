//! Text serialization of run artifacts: trajectory CSV and the atom-table
//! format for measures. Structured result documents (solutions, gap reports)
//! are serde types serialized by the frontend.

use std::fmt::Write as _;

use crate::sim::Trajectory;

/// Trajectory CSV with header `t,u1..,y1..,z1..,anchor_flag`. `stride`
/// subsamples rows (1 = every sample); the final sample is always written.
pub fn trajectory_csv(traj: &Trajectory, stride: usize) -> String {
    let stride = stride.max(1);
    let mut out = String::new();
    out.push('t');
    for i in 0..traj.dim_u {
        let _ = write!(out, ",u{}", i + 1);
    }
    for i in 0..traj.dim_y {
        let _ = write!(out, ",y{}", i + 1);
    }
    for i in 0..traj.dim_z {
        let _ = write!(out, ",z{}", i + 1);
    }
    out.push_str(",anchor_flag\n");
    let n = traj.len();
    for k in 0..n {
        if k % stride != 0 && k != n - 1 {
            continue;
        }
        let _ = write!(out, "{:.12e}", traj.times[k]);
        for v in traj.u(k) {
            let _ = write!(out, ",{v:.12e}");
        }
        for v in traj.y(k) {
            let _ = write!(out, ",{v:.12e}");
        }
        for v in traj.z(k) {
            let _ = write!(out, ",{v:.12e}");
        }
        let _ = write!(out, ",{}", u8::from(traj.anchor_flags[k]));
        out.push('\n');
    }
    out
}

/// Picks a stride so the CSV stays under roughly `max_rows` rows.
pub fn auto_stride(samples: usize, max_rows: usize) -> usize {
    if max_rows == 0 || samples <= max_rows {
        1
    } else {
        samples.div_ceil(max_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape_and_header() {
        let mut traj = Trajectory::with_dims(2, 2, 1, 0.1);
        for k in 0..10 {
            traj.push(
                k as f64 * 0.1,
                &[0.1, -0.2],
                &[0.3, 0.4],
                &[1.0 - 0.01 * k as f64],
                k == 5,
            );
        }
        let csv = trajectory_csv(&traj, 1);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,u1,u2,y1,y2,z1,anchor_flag");
        assert_eq!(csv.lines().count(), 11);
        let row5 = csv.lines().nth(6).unwrap();
        assert!(row5.ends_with(",1"));
    }

    #[test]
    fn stride_keeps_last_sample() {
        let mut traj = Trajectory::with_dims(1, 1, 1, 0.1);
        for k in 0..100 {
            traj.push(k as f64 * 0.1, &[0.0], &[0.0], &[k as f64], false);
        }
        let csv = trajectory_csv(&traj, 7);
        assert!(csv.lines().last().unwrap().contains("9.9"));
        assert_eq!(auto_stride(1000, 100), 10);
        assert_eq!(auto_stride(50, 100), 1);
    }
}
