#[test]
fn dbg_worst_per_kind() {
    use f2p_core::synth::*;
    use f2p_core::geometry::orientation_field;
    use std::f64::consts::PI;
    let core = (31.0, 33.0);
    for kind in PatternKind::ALL {
        let field = synth_orientation(kind, core, 64, 8).unwrap();
        let img = synth_fingerprint(&field, 8.0, 7).unwrap();
        let m = orientation_field(&img, 8);
        let mut worst = 0.0f64;
        let mut at = (0, 0);
        println!("--- {kind} error grid (deg; .=skip) ---");
        for r in 1..7 {
            let mut row = String::new();
            for c in 1..7 {
                let i = field.at(r, c);
                let (bx, by) = field.block_center(r, c);
                let near = ((bx - core.0).powi(2) + (by - core.1).powi(2)).sqrt() < 10.0;
                let mut d = (m.angle[i] - field.angle[i]).rem_euclid(PI);
                if d > PI / 2.0 {
                    d = PI - d;
                }
                if m.coherence[i] <= 0.8 || near {
                    row.push_str(&format!("  (.{:4.1}.)", d.to_degrees()));
                    continue;
                }
                row.push_str(&format!("  {:6.2}  ", d.to_degrees()));
                if d > worst {
                    worst = d;
                    at = (r, c);
                }
            }
            println!("{row}");
        }
        println!("{kind}: worst {:.2}° at {:?}", worst.to_degrees(), at);
    }
}
