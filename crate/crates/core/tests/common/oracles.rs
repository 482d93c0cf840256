//! Deliberately naive reference implementations of the set metrics.

pub type P = [f32; 3];

pub fn brute_chamfer(a: &[P], b: &[P]) -> f64 {
    let d = |p: &P, q: &P| -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let e = p[k] as f64 - q[k] as f64;
            s += e * e;
        }
        s
    };
    let mut ab = 0.0;
    for p in a {
        let mut m = f64::INFINITY;
        for q in b {
            if d(p, q) < m {
                m = d(p, q);
            }
        }
        ab += m;
    }
    let mut ba = 0.0;
    for q in b {
        let mut m = f64::INFINITY;
        for p in a {
            if d(q, p) < m {
                m = d(q, p);
            }
        }
        ba += m;
    }
    ab / a.len() as f64 + ba / b.len() as f64
}

pub fn brute_mmd_cov(gen: &[Vec<P>], reference: &[Vec<P>]) -> (f64, f64) {
    let mut mmd = 0.0;
    for r in reference {
        let mut m = f64::INFINITY;
        for g in gen {
            m = m.min(brute_chamfer(g, r));
        }
        mmd += m;
    }
    let mut hit = vec![0usize; reference.len()];
    for g in gen {
        let mut best = 0;
        for r in 1..reference.len() {
            if brute_chamfer(g, &reference[r]) < brute_chamfer(g, &reference[best]) {
                best = r;
            }
        }
        hit[best] += 1;
    }
    let covered = hit.iter().filter(|&&h| h > 0).count();
    (mmd / reference.len() as f64, 100.0 * covered as f64 / reference.len() as f64)
}

pub fn brute_one_nna(gen: &[Vec<P>], reference: &[Vec<P>]) -> f64 {
    let mut all: Vec<(&Vec<P>, bool)> = gen.iter().map(|s| (s, true)).collect();
    all.extend(reference.iter().map(|s| (s, false)));
    let mut right = 0;
    for i in 0..all.len() {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..all.len() {
            if i == j {
                continue;
            }
            let d = brute_chamfer(all[i].0, all[j].0);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((j, d)),
            }
        }
        if all[best.unwrap().0].1 == all[i].1 {
            right += 1;
        }
    }
    100.0 * right as f64 / all.len() as f64
}
