//! Invariant checks on encoded waypoint features.

use pathnav::pathrep::encode_path;

pub fn rotate_z(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Bounds, unit directions, the exact maximum of the distance feature, and
/// behavior under a common rotation of every waypoint.
pub fn check_encoding(rel: &[[f64; 3]], eps: f64, angle: f64) -> Result<(), String> {
    let enc = encode_path(rel, eps);
    if enc.len() != rel.len() {
        return Err(format!("{} rows for {} waypoints", enc.len(), rel.len()));
    }
    let mut max4 = 0.0_f64;
    for (k, row) in enc.rows.iter().enumerate() {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if !(n == 0.0 || (n - 1.0).abs() <= 1e-6) {
            return Err(format!("row {k}: direction norm {n}"));
        }
        if !(0.0..=1.0).contains(&row[3]) {
            return Err(format!("row {k}: distance feature {}", row[3]));
        }
        max4 = max4.max(row[3]);
    }
    let far = rel
        .iter()
        .any(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() > eps);
    if far && max4 != 1.0 {
        return Err(format!("largest distance feature is {max4}, not 1"));
    }
    let turned: Vec<[f64; 3]> = rel.iter().map(|&p| rotate_z(p, angle)).collect();
    let enc_r = encode_path(&turned, eps);
    for (k, (a, b)) in enc.rows.iter().zip(&enc_r.rows).enumerate() {
        let want = rotate_z([a[0], a[1], a[2]], angle);
        for i in 0..3 {
            if (want[i] - b[i]).abs() > 1e-9 {
                return Err(format!("row {k}: direction not equivariant ({} vs {})", want[i], b[i]));
            }
        }
        if (a[3] - b[3]).abs() > 1e-9 {
            return Err(format!("row {k}: distance feature changed under rotation"));
        }
    }
    Ok(())
}
