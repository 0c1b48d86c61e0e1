//! Temporary diagnostics for desk-scale metric calibration.

use nlbss_core::coordinate_map::{build_map, evaluate_map, MapOptions};
use nlbss_core::local_frames::{align_frames, frames_from_grid, transformed_correlations};
use nlbss_core::phase_binning::{build_grid, estimate_velocity};
use nlbss_core::pipeline::recovery_metrics;
use nlbss_core::separability::independence_stats;
use nlbss_core::signal_io::{generate_sources, mix_sources, pca_normalize, MixingParams};
use nlbss_core::weights::{
    compute_weights, enumerate_partitions, match_signed_permutation, unmixed_reference_weights,
    weight_correlation, WeightSeries,
};

#[test]
#[ignore]
fn unmixed_metrics() {
    let t_len = 500_000;
    let sources = generate_sources("ar2-noise", 2, t_len, 16_000.0, 7).unwrap();
    let (norm, _) = pca_normalize(&sources).unwrap();
    let samples = estimate_velocity(&norm).unwrap();
    let grid = build_grid(&samples, &[16, 16], 200, 1e-6).unwrap();
    println!("unmixed grid: {} valid bins", grid.valid_bins().count());
    let raw = frames_from_grid(&grid, 1e-3);
    println!(
        "unmixed frames: {} built, {} degenerate",
        raw.iter().flatten().count(),
        raw.iter().flatten().filter(|f| f.degenerate).count()
    );
    let field = align_frames(&grid, raw).unwrap();
    let geom = field.geometry();
    // Off-diagonality of M per bin (true frames are diagonal up to signed
    // permutation for independent channels).
    let mut worst_offdiag = 0.0_f64;
    let mut bad_bins = 0;
    for b in field.usable_bins() {
        let m = &field.frame(b).unwrap().m;
        let maxabs = m.amax();
        // Most-diagonal signed permutation: try identity and swap.
        let direct = m[(0, 1)].abs().max(m[(1, 0)].abs());
        let swapped = m[(0, 0)].abs().max(m[(1, 1)].abs());
        let offdiag = direct.min(swapped) / maxabs;
        if offdiag > 0.05 {
            bad_bins += 1;
            if bad_bins < 8 {
                println!(
                    "  offdiag bin {:?} (n={}): {:.3} d=({:.2},{:.2})",
                    geom.multi_index(b),
                    grid.bin(b).count,
                    offdiag,
                    field.frame(b).unwrap().d[0],
                    field.frame(b).unwrap().d[1],
                );
            }
        }
        worst_offdiag = worst_offdiag.max(offdiag);
    }
    println!(
        "unmixed offdiag: worst {worst_offdiag:.3}, {} bins over 0.05 of {}",
        bad_bins,
        field.usable_bins().count()
    );
    // Decile spread and sample-weighted mean of the off-diagonality.
    let mut per_bin: Vec<(f64, usize)> = field
        .usable_bins()
        .map(|b| {
            let m = &field.frame(b).unwrap().m;
            let maxabs = m.amax();
            let direct = m[(0, 1)].abs().max(m[(1, 0)].abs());
            let swapped = m[(0, 0)].abs().max(m[(1, 1)].abs());
            (direct.min(swapped) / maxabs, grid.bin(b).count)
        })
        .collect();
    per_bin.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: usize = per_bin.iter().map(|p| p.1).sum();
    let weighted: f64 =
        per_bin.iter().map(|p| p.0 * p.1 as f64).sum::<f64>() / total as f64;
    println!(
        "unmixed offdiag deciles: p50 {:.3} p90 {:.3}, sample-weighted mean {:.4}",
        per_bin[per_bin.len() / 2].0,
        per_bin[per_bin.len() * 9 / 10].0,
        weighted
    );
    let mut worst_angle = 0.0_f64;
    for b in field.usable_bins() {
        let fb = field.frame(b).unwrap();
        for nb in geom.neighbors(b) {
            if nb < b || !field.is_usable(nb) {
                continue;
            }
            let fn_ = field.frame(nb).unwrap();
            for r in 0..2 {
                let a = fb.m.row(r).transpose();
                let c = fn_.m.row(r).transpose();
                let cosang = (a.dot(&c) / (a.norm() * c.norm())).clamp(-1.0, 1.0);
                worst_angle = worst_angle.max(cosang.acos().to_degrees());
            }
        }
    }
    println!("unmixed worst adjacent angle: {worst_angle:.1} deg");

    // Signed V-direction error against the axis-aligned truth:
    // sample-weighted bias vs rms, per column.
    for col in 0..2 {
        let mut wsum = 0.0;
        let mut bias = 0.0;
        let mut rms = 0.0;
        for b in field.usable_bins() {
            let v = &field.frame(b).unwrap().v;
            // Column col should align with axis col (up to global signed
            // permutation fixed by the aligned field; detect by max comp).
            let vx = v[(0, col)];
            let vy = v[(1, col)];
            let ang = if vx.abs() >= vy.abs() {
                vy.atan2(vx.abs() * vx.signum()).abs().min((-vy).atan2(vx.abs()).abs())
            } else {
                vx.atan2(vy.abs()).abs().min((-vx).atan2(vy.abs()).abs())
            };
            let signed = if vx.abs() >= vy.abs() {
                (vy / (vx * vx + vy * vy).sqrt()).asin() * vx.signum()
            } else {
                (vx / (vx * vx + vy * vy).sqrt()).asin() * vy.signum()
            };
            let n = grid.bin(b).count as f64;
            wsum += n;
            bias += n * signed;
            rms += n * ang * ang;
            let _ = ang;
        }
        println!(
            "unmixed V{col} angle: bias {:.2} deg, rms {:.2} deg",
            (bias / wsum).to_degrees(),
            (rms / wsum).sqrt().to_degrees()
        );
    }
}

#[test]
#[ignore]
fn linear_mix_check() {
    let t_len = 500_000;
    let sources = generate_sources("ar2-noise", 2, t_len, 16_000.0, 7).unwrap();
    let mixed = {
        let mut data = Vec::with_capacity(2 * t_len);
        for t in 0..t_len {
            let s = sources.sample(t);
            data.push(0.8 * s[0] + 0.3 * s[1]);
            data.push(-0.2 * s[0] + 0.9 * s[1]);
        }
        nlbss_core::signal_io::TimeSeries::new(2, 16_000.0, data).unwrap()
    };
    let (measurements, _) = pca_normalize(&mixed).unwrap();
    let samples = estimate_velocity(&measurements).unwrap();
    let grid = build_grid(&samples, &[16, 16], 200, 1e-6).unwrap();
    let raw = frames_from_grid(&grid, 1e-3);
    let field = align_frames(&grid, raw).unwrap();
    let w = compute_weights(&samples, &field).unwrap();
    let corr = weight_correlation(&w).unwrap();
    println!("linear: weight corr {}", corr[(0, 1)]);
    let wref = unmixed_reference_weights(&sources, &[vec![0], vec![1]], 64, 50, 1e-6, 1e-3).unwrap();
    let (wa, wb) = WeightSeries::intersect_by_time(&w, &wref);
    let (perm, residual) = match_signed_permutation(&wa, &wb).unwrap();
    println!("linear: weight invariance residual {residual} (perm {:?})", perm.perm);
    for k in 0..2 {
        let a = wa.channel(k);
        let b: Vec<f64> = wb.channel(perm.perm[k]).iter().map(|v| v * perm.signs[k]).collect();
        let corr = nlbss_core::numeric::pearson(&a, &b);
        println!("  linear w{k}: corr {corr:.4}");
    }
}

#[test]
#[ignore]
fn desk_metrics() {
    let t0 = std::time::Instant::now();
    let t_len = 500_000;
    let sources = generate_sources("ar2-noise", 2, t_len, 16_000.0, 7).unwrap();
    println!("gen: {:?}", t0.elapsed());

    // Kurtosis of channels and their velocities.
    for k in 0..2 {
        let ch = sources.channel(k);
        let n = ch.len() as f64;
        let mean: f64 = ch.iter().sum::<f64>() / n;
        let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4: f64 = ch.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        println!("ch{k}: kurtosis {}", m4 / (var * var));
    }

    let mixed = mix_sources(&sources, &MixingParams::default()).unwrap();
    let (measurements, _) = pca_normalize(&mixed).unwrap();
    let samples = estimate_velocity(&measurements).unwrap();
    let grid = build_grid(&samples, &[16, 16], 200, 1e-6).unwrap();
    let valid = grid.valid_bins().count();
    println!(
        "grid: {} valid bins, densest {}",
        valid,
        grid.bin(grid.densest_valid_bin().unwrap()).count
    );
    let raw = frames_from_grid(&grid, 1e-3);
    let degenerate = raw.iter().flatten().filter(|f| f.degenerate).count();
    let built = raw.iter().flatten().count();
    println!("frames: {built} built, {degenerate} degenerate");
    // D-gap statistics.
    let mut gaps: Vec<f64> = raw
        .iter()
        .flatten()
        .map(|f| (f.d[0] - f.d[1]).abs() / f.d[0].abs().max(f.d[1].abs()))
        .collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "relative D gaps: min {} p10 {} median {}",
        gaps[0],
        gaps[gaps.len() / 10],
        gaps[gaps.len() / 2]
    );

    let field = align_frames(&grid, raw).unwrap();

    // Frame exactness on stored moments.
    let mut worst_i2 = 0.0_f64;
    let mut worst_q = 0.0_f64;
    for b in field.exact_bins() {
        let frame = field.frame(b).unwrap();
        let bin = grid.bin(b);
        let (i2, q) = transformed_correlations(&frame.m, &bin.c2, &bin.c4).unwrap();
        let dev = (i2 - nalgebra::DMatrix::identity(2, 2)).amax();
        worst_i2 = worst_i2.max(dev);
        let qmax = q[(0, 0)].abs().max(q[(1, 1)].abs());
        worst_q = worst_q.max(q[(0, 1)].abs() / qmax);
    }
    println!("frame exactness: worst |MC2M^T - I| {worst_i2:e}, worst rel offdiag {worst_q:e}");

    // Adjacent matched-row angles.
    let mut worst_angle = 0.0_f64;
    let geom = field.geometry();
    for b in field.usable_bins() {
        let fb = field.frame(b).unwrap();
        for nb in geom.neighbors(b) {
            if nb < b || !field.is_usable(nb) {
                continue;
            }
            let fn_ = field.frame(nb).unwrap();
            let mut pair_worst = 0.0_f64;
            for r in 0..2 {
                let a = fb.m.row(r).transpose();
                let c = fn_.m.row(r).transpose();
                let cosang = (a.dot(&c) / (a.norm() * c.norm())).clamp(-1.0, 1.0);
                pair_worst = pair_worst.max(cosang.acos().to_degrees());
            }
            if pair_worst > 30.0 {
                println!(
                    "  bad pair: {:?} (n={}) vs {:?} (n={}) angle {:.1}",
                    geom.multi_index(b),
                    grid.bin(b).count,
                    geom.multi_index(nb),
                    grid.bin(nb).count,
                    pair_worst
                );
            }
            worst_angle = worst_angle.max(pair_worst);
        }
    }
    println!("worst adjacent matched-row angle: {worst_angle} deg");

    let w = compute_weights(&samples, &field).unwrap();
    let corr = weight_correlation(&w).unwrap();
    println!("weight corr: {} (dropped {})", corr[(0, 1)], w.dropped);

    // Reference weights from unmixed blocks.
    let wref = unmixed_reference_weights(&sources, &[vec![0], vec![1]], 64, 50, 1e-6, 1e-3).unwrap();
    let (wa, wb) = WeightSeries::intersect_by_time(&w, &wref);
    let (perm, residual) = match_signed_permutation(&wa, &wb).unwrap();
    println!("weight invariance residual: {residual} (perm {:?})", perm.perm);
    for k in 0..2 {
        let a = wa.channel(k);
        let b: Vec<f64> = wb.channel(perm.perm[k]).iter().map(|v| v * perm.signs[k]).collect();
        let corr = nlbss_core::numeric::pearson(&a, &b);
        let rms_a = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        let rms_d = (a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / a.len() as f64)
            .sqrt();
        println!("  w{k}: corr {corr:.4} rel rms dev {:.4}", rms_d / rms_a);
    }

    // Determinant-sign consistency across the aligned field.
    let (mut pos, mut neg) = (0usize, 0usize);
    for b in field.usable_bins() {
        if field.frame(b).unwrap().m.determinant() > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    println!("det signs: {pos} positive, {neg} negative");

    // Per-bin weight deviation vs the reference, worst offenders.
    let mut by_bin: std::collections::BTreeMap<usize, (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    let lookup: std::collections::HashMap<usize, usize> = wb
        .time_indices()
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    for i in 0..samples.len() {
        let s = samples.get(i);
        let Ok(b) = field.bin_for(s.x) else { continue };
        let Some(&j) = lookup.get(&s.t_index) else { continue };
        let wm = wa.get(j);
        let wr = wb.get(j);
        let dev: f64 = (0..2)
            .map(|k| {
                let r = perm.signs[k] * wr[perm.perm[k]];
                (wm[k] - r) * (wm[k] - r)
            })
            .sum();
        let mag: f64 = wm.iter().map(|v| v * v).sum();
        let e = by_bin.entry(b).or_insert((0.0, 0.0, 0));
        e.0 += dev;
        e.1 += mag;
        e.2 += 1;
    }
    let mut rows: Vec<(usize, f64, usize)> = by_bin
        .iter()
        .map(|(&b, &(dev, mag, n))| (b, (dev / mag.max(1e-300)).sqrt(), n))
        .collect();
    rows.sort_by(|a, b| (b.1 * b.2 as f64).partial_cmp(&(a.1 * a.2 as f64)).unwrap());
    println!("worst weight-deviation bins (bin idx, rel dev, n):");
    for (b, dev, n) in rows.iter().take(10) {
        println!(
            "  {:?} dev {:.3} n {} det {:+.2e} d {:?}",
            field.geometry().multi_index(*b),
            dev,
            n,
            field.frame(*b).unwrap().m.determinant(),
            field.frame(*b).unwrap().d
        );
    }

    let partitions = enumerate_partitions(&corr, 0.05);
    println!("partitions: {}", partitions.len());
    let x0_bin = field.densest_usable_bin().unwrap();
    let x0 = field.geometry().center(x0_bin);
    let opts = MapOptions::for_field(&field);
    println!("map opts: step {} cross_tol {} max_param {}", opts.step, opts.cross_tol, opts.max_param);
    let t_map = std::time::Instant::now();
    let map = build_map(&field, &partitions[0], &x0, &opts).unwrap();
    println!("map build: {:?}", t_map.elapsed());
    println!("defined fraction: {}", map.defined_fraction(&field));

    let u = evaluate_map(&map, &measurements).unwrap();
    println!("map dropped: {}", u.dropped);
    let report = independence_stats(&u, 0.05).unwrap();
    println!(
        "verdict: {} max_stat {} spearmanableau {:?} momdu {:?}",
        report.verdict, report.max_stat, report.moment_u, report.moment_du
    );
    let rec = recovery_metrics(&u, &sources).unwrap();
    println!(
        "recovery: matched {:?} cross {:?}",
        rec.matched_spearman, rec.cross_spearman
    );

    // Systematic bend diagnostic: remove the monotone part of u_k(s_k) by
    // binned conditional means over s_k, then correlate the residual with
    // the other source and its square.
    for (k, sk_match) in [(0usize, rec.pairing[0]), (1usize, rec.pairing[1])] {
        let uk = u.channel(k);
        let sk: Vec<f64> = (0..u.len())
            .map(|i| sources.sample(u.t_index(i))[sk_match])
            .collect();
        let so: Vec<f64> = (0..u.len())
            .map(|i| sources.sample(u.t_index(i))[1 - sk_match])
            .collect();
        // 200 quantile bins over sk.
        let mut order: Vec<usize> = (0..sk.len()).collect();
        order.sort_by(|&a, &b| sk[a].partial_cmp(&sk[b]).unwrap());
        let nb = 200;
        let mut fitted = vec![0.0; sk.len()];
        for c in 0..nb {
            let lo = c * sk.len() / nb;
            let hi = ((c + 1) * sk.len() / nb).max(lo + 1);
            let mean: f64 =
                order[lo..hi].iter().map(|&i| uk[i]).sum::<f64>() / (hi - lo) as f64;
            for &i in &order[lo..hi] {
                fitted[i] = mean;
            }
        }
        let eps: Vec<f64> = uk.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let so2: Vec<f64> = so.iter().map(|v| v * v).collect();
        let eps_rms = (eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64).sqrt();
        let uk_sd = {
            let m = uk.iter().sum::<f64>() / uk.len() as f64;
            (uk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / uk.len() as f64).sqrt()
        };
        println!(
            "u{k} residual: rel rms {:.4}, corr(eps, s_other) {:.4}, corr(eps, s_other^2) {:.4}",
            eps_rms / uk_sd,
            nlbss_core::numeric::pearson(&eps, &so),
            nlbss_core::numeric::pearson(&eps, &so2),
        );
    }
    println!("total: {:?}", t0.elapsed());
}
