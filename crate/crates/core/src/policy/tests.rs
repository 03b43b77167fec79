use super::*;
use crate::aoi_graph::fixtures::*;
use crate::environment::{reset, CoverageEnv, RewardConfig};

fn small(d: usize, seed: u64) -> PolicyParams {
    PolicyParams::init(PolicyDims { d, layers: 2, heads: 2, glimpses: 2, k_hop: 1, clip: 10.0 }, seed).unwrap()
}

/// Greedy action sequence under `params`, used as a fixed trajectory.
fn greedy_actions(params: &PolicyParams, graph: &AoiGraph) -> Vec<usize> {
    let mut enc = encode(params, graph);
    let mut env = CoverageEnv::new(graph, RewardConfig::default());
    let mut out = Vec::new();
    while !env.state().done() {
        let sv = enc.decode_step(params, env.state(), graph, 1.0).unwrap();
        let lp = enc.tape.value(sv.logp);
        let a = (0..lp.cols).filter(|&j| sv.mask[j]).max_by(|&a, &b| lp.data[a].total_cmp(&lp.data[b])).unwrap();
        out.push(a);
        env.step(a).unwrap();
    }
    out
}

/// Straight-line re-implementation of the network for one decision.
mod reference {
    use super::*;

    type M = Vec<Vec<f64>>;

    fn w(p: &PolicyParams, name: &str) -> M {
        let s = p.layout.slot(name);
        let v = p.get(name);
        (0..s.rows).map(|r| v[r * s.cols..(r + 1) * s.cols].to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        let (r, k, c) = (a.len(), b.len(), b[0].len());
        let mut o = vec![vec![0.0; c]; r];
        for i in 0..r {
            for j in 0..c {
                for t in 0..k {
                    o[i][j] += a[i][t] * b[t][j];
                }
            }
        }
        o
    }

    fn plus_row(a: &M, b: &M) -> M {
        a.iter().map(|row| row.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
    }

    fn plus(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn ln(a: &M, g: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean) / (var + tape::LN_EPS).sqrt() * g[0][j] + b[0][j])
                    .collect()
            })
            .collect()
    }

    fn softmax(x: &[f64], allow: &[bool]) -> Vec<f64> {
        let m = x.iter().zip(allow).filter(|p| *p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().zip(allow).map(|(v, &a)| if a { (v - m).exp() } else { 0.0 }).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn attend(q: &M, k: &M, v: &M, allow: &dyn Fn(usize, usize) -> bool, scale: f64) -> M {
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
                let mask: Vec<bool> = (0..k.len()).map(|j| allow(i, j)).collect();
                let a = softmax(&s, &mask);
                (0..v[0].len()).map(|c| (0..v.len()).map(|j| a[j] * v[j][c]).sum()).collect()
            })
            .collect()
    }

    fn cols(a: &M, start: usize, len: usize) -> M {
        a.iter().map(|r| r[start..start + len].to_vec()).collect()
    }

    pub fn logits(p: &PolicyParams, graph: &AoiGraph, state: &EnvState) -> Vec<f64> {
        let dims = p.dims;
        let (d, nh) = (dims.d, dims.heads);
        let dh = d / nh;
        let n = graph.num_nodes();
        let x: M = graph.features().iter().map(|f| f.to_array().to_vec()).collect();
        let near = |i: usize, j: usize| i == j || graph.are_adjacent(i, j);
        let mut h = plus_row(&mm(&x, &w(p, "embed.w")), &w(p, "embed.b"));
        for l in 0..dims.layers {
            let nm = |s: &str| format!("enc{l}.{s}");
            let z = ln(&h, &w(p, &nm("ln1.g")), &w(p, &nm("ln1.b")));
            let (q, k, v) = (mm(&z, &w(p, &nm("wq"))), mm(&z, &w(p, &nm("wk"))), mm(&z, &w(p, &nm("wv"))));
            let mut cat = vec![Vec::new(); n];
            for hd in 0..nh {
                let o = attend(&cols(&q, hd * dh, dh), &cols(&k, hd * dh, dh), &cols(&v, hd * dh, dh), &near, 1.0 / (dh as f64).sqrt());
                for i in 0..n {
                    cat[i].extend_from_slice(&o[i]);
                }
            }
            h = plus(&h, &mm(&cat, &w(p, &nm("wo"))));
            let z2 = ln(&h, &w(p, &nm("ln2.g")), &w(p, &nm("ln2.b")));
            let f = plus_row(&mm(&z2, &w(p, &nm("ff.w1"))), &w(p, &nm("ff.b1")));
            let f: M = f.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
            let f = plus_row(&mm(&f, &w(p, &nm("ff.w2"))), &w(p, &nm("ff.b2")));
            h = plus(&h, &f);
        }
        let hf = ln(&h, &w(p, "enc.ln.g"), &w(p, "enc.ln.b"));
        let mean: Vec<f64> = (0..d).map(|c| hf.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let sig = vec![signals(state, graph).to_vec()];
        let s = plus_row(&mm(&sig, &w(p, "sig.w")), &w(p, "sig.b"));
        let mut ctx = hf[state.current].clone();
        ctx.extend_from_slice(&hf[graph.base()]);
        ctx.extend_from_slice(&mean);
        ctx.extend_from_slice(&s[0]);
        let q0 = plus_row(&mm(&vec![ctx], &w(p, "ctx.w")), &w(p, "ctx.b"));
        let m = plus_row(&mm(&q0, &w(p, "ctx.mlp.w1")), &w(p, "ctx.mlp.b1"));
        let m: M = m.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        let m = plus_row(&mm(&m, &w(p, "ctx.mlp.w2")), &w(p, "ctx.mlp.b2"));
        let mut q = plus(&q0, &m);
        let mask = action_mask(state, graph);
        for k in 0..dims.glimpses {
            let nm = |s: &str| format!("glimpse{k}.{s}");
            let qk = mm(&q, &w(p, &nm("wq")));
            let kk = mm(&hf, &w(p, &nm("wk")));
            let vv = mm(&hf, &w(p, &nm("wv")));
            let g = attend(&qk, &kk, &vv, &|_, j| mask[j], 1.0 / (d as f64).sqrt());
            q = plus(&q, &mm(&g, &w(p, &nm("wo"))));
        }
        let qp = mm(&q, &w(p, "ptr.wq"))[0].clone();
        let keys = mm(&hf, &w(p, "ptr.wk"));
        let wb0 = w(p, "ptr.wb")[0].clone();
        let alpha = p.get("ptr.alpha")[0];
        let v = p.get("ptr.v");
        (0..n)
            .map(|j| {
                let vis = if state.is_visited(j) { 1.0 } else { 0.0 };
                let l: f64 = (0..d)
                    .map(|c| v[c] * ((qp[c] + keys[j][c] + alpha * vis * wb0[c]) / (d as f64).sqrt()).tanh())
                    .sum();
                dims.clip * l.tanh()
            })
            .collect()
    }
}

#[test]
fn logits_match_reference_implementation() {
    for seed in 0..3 {
        let params = small(8, seed);
        let g = block(3, 4);
        let mut enc = encode(&params, &g);
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        for a in greedy_actions(&params, &g) {
            let sv = enc.decode_step(&params, env.state(), &g, 1.0).unwrap();
            let ours = enc.tape.value(sv.logits).data.clone();
            let theirs = reference::logits(&params, &g, env.state());
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
            env.step(a).unwrap();
        }
    }
}

#[test]
fn logits_are_bounded_by_clip() {
    let mut params = small(8, 5);
    params.get_mut("ptr.v").iter_mut().for_each(|v| *v *= 100.0);
    let g = flower();
    let mut enc = encode(&params, &g);
    let sv = enc.decode_step(&params, &reset(&g), &g, 1.0).unwrap();
    let l = enc.tape.value(sv.logits);
    assert!(l.data.iter().all(|v| v.abs() <= params.dims.clip));
    assert!(l.data.iter().any(|v| v.abs() > 9.0));
}

#[test]
fn zero_gate_ignores_visited_status() {
    let g = flower();
    let state = reset(&g);
    let (sig, mask) = (signals(&state, &g), action_mask(&state, &g));
    let clean = [0.0; 9];
    let mut flipped = clean;
    flipped[3] = 1.0;
    for (alpha, same) in [(0.0, true), (1.0, false)] {
        let mut params = small(8, 2);
        params.get_mut("ptr.alpha")[0] = alpha;
        let mut e = encode(&params, &g);
        let x = e.pointer(&params, state.current, &sig, &clean, &mask);
        let y = e.pointer(&params, state.current, &sig, &flipped, &mask);
        assert_eq!(e.tape.value(x).data[3] == e.tape.value(y).data[3], same, "alpha {alpha}");
    }
}

#[test]
fn mean_embedding_of_rows() {
    let params = small(8, 1);
    let g = axial_graph(&[(0, 0)], &[(0, 0)]);
    let enc = encode(&params, &g);
    let h = enc.tape.value(enc.embeddings);
    let m = enc.tape.value(enc.graph_mean);
    for c in 0..8 {
        let want = (0..3).map(|r| h.at(r, c)).sum::<f64>() / 3.0;
        assert!((m.data[c] - want).abs() < 1e-15);
    }
    // Base and terminal are indistinguishable, and the lone cell's mean with
    // them is the embedding itself when all three coincide.
    assert_eq!(h.row(1), h.row(2));
}

#[test]
fn permutation_equivariance() {
    let params = small(8, 3);
    let cells = vec![(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (-1, 2), (0, 2)];
    let base = [(0, 0), (2, 0), (-1, 2)];
    let g = axial_graph(&cells, &base);
    let perm = [4usize, 2, 6, 0, 5, 1, 3];
    let permuted: Vec<_> = perm.iter().map(|&i| cells[i]).collect();
    let gp = axial_graph(&permuted, &base);
    let (e, ep) = (encode(&params, &g), encode(&params, &gp));
    let (h, hp) = (e.tape.value(e.embeddings), ep.tape.value(ep.embeddings));
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((hp.at(new, c) - h.at(old, c)).abs() < 1e-12);
        }
    }
    let (m, mp) = (e.tape.value(e.graph_mean), ep.tape.value(ep.graph_mean));
    assert!(m.data.iter().zip(&mp.data).all(|(a, b)| (a - b).abs() < 1e-12));
    let mut e = e;
    let mut ep = ep;
    let s = e.decode_step(&params, &reset(&g), &g, 1.0).unwrap();
    let sp = ep.decode_step(&params, &reset(&gp), &gp, 1.0).unwrap();
    let (pr, pp) = (e.tape.value(s.logp), ep.tape.value(sp.logp));
    for (new, &old) in perm.iter().enumerate() {
        let (a, b) = (pp.data[new].exp(), pr.data[old].exp());
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_hop_attention_is_local() {
    let params = PolicyParams::init(PolicyDims { d: 8, layers: 1, heads: 2, glimpses: 1, k_hop: 1, clip: 10.0 }, 4).unwrap();
    let g = flower();
    let feats: Vec<f64> = g.features().iter().flat_map(|f| f.to_array()).collect();
    // Petal 1 = (1,0); petal 4 = (-1,0) is not its neighbour.
    assert!(!g.are_adjacent(1, 4));
    let mut zeroed = feats.clone();
    zeroed[4 * 4..4 * 4 + 4].fill(0.0);
    let a = encode_features(&params, &g, feats);
    let b = encode_features(&params, &g, zeroed);
    assert_eq!(a.tape.value(a.embeddings).row(1), b.tape.value(b.embeddings).row(1));
    assert_ne!(a.tape.value(a.embeddings).row(0), b.tape.value(b.embeddings).row(0));
}

#[test]
fn masked_policy_examples() {
    assert_eq!(masked_policy(&[1.0, 2.0], &[true, false], 1.0).unwrap(), [1.0, 0.0]);
    let u = masked_policy(&[0.3; 4], &[true; 4], 1.7).unwrap();
    assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let l = [0.5, -1.0, 2.0, 0.1];
    let hot = masked_policy(&l, &[true; 4], 1.5).unwrap();
    let cold = masked_policy(&l, &[true; 4], 1.0).unwrap();
    assert!(entropy(&hot) > entropy(&cold));
    assert!((hot.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(masked_policy(&l, &[false; 4], 1.0), Err(PolicyError::EmptyMask)));
}

/// Weighted sum of step log-probs and entropies along a fixed trajectory.
fn objective(params: &PolicyParams, g: &AoiGraph, actions: &[usize], cw: &[f64], ew: &[f64]) -> f64 {
    let (enc, steps) = replay(params, g, actions, 1.3).unwrap();
    let mut t = enc.tape;
    let mut f = 0.0;
    for (k, (sv, &a)) in steps.iter().zip(actions).enumerate() {
        f += cw[k] * t.value(sv.logp).data[a];
        let h = t.entropy(sv.logp);
        f += ew[k] * t.scalar(h);
    }
    f
}

fn analytic(params: &PolicyParams, g: &AoiGraph, actions: &[usize], cw: &[f64], ew: &[f64]) -> Vec<f64> {
    let (enc, steps) = replay(params, g, actions, 1.3).unwrap();
    let mut t = enc.tape;
    let mut seeds = Vec::new();
    for (k, (sv, &a)) in steps.iter().zip(actions).enumerate() {
        let lp = t.pick(sv.logp, a);
        let h = t.entropy(sv.logp);
        seeds.push((lp, Mat::from_vec(1, 1, vec![cw[k]])));
        seeds.push((h, Mat::from_vec(1, 1, vec![ew[k]])));
    }
    let mut grad = vec![0.0; params.len()];
    t.backward(&seeds, &mut grad);
    grad
}

#[test]
fn gradients_match_central_differences() {
    use rand::Rng;
    for seed in 0..3 {
        let params = small(8, 10 + seed);
        let g = flower();
        let actions = greedy_actions(&params, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cw: Vec<f64> = actions.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ew: Vec<f64> = actions.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = analytic(&params, &g, &actions, &cw, &ew);
        let h = 1e-5;
        let mut fd = vec![0.0; params.len()];
        for k in 0..params.len() {
            let mut p = params.clone();
            p.theta[k] += h;
            let up = objective(&p, &g, &actions, &cw, &ew);
            p.theta[k] -= 2.0 * h;
            let down = objective(&p, &g, &actions, &cw, &ew);
            fd[k] = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm <= 1e-4, "seed {seed}: relative error {}", diff / norm);
        // Every named block individually.
        for name in params.layout.names() {
            let s = params.layout.slot(name);
            let r = s.offset..s.offset + s.len();
            let dn: f64 = grad[r.clone()].iter().zip(&fd[r.clone()]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let nn: f64 = fd[r].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dn <= 1e-4 * nn.max(1e-6), "seed {seed} block {name}: {dn} vs {nn}");
        }
    }
}

#[test]
fn zero_and_doubled_upstream_gradients() {
    let params = small(8, 7);
    let g = flower();
    let actions = greedy_actions(&params, &g);
    let zeros = vec![0.0; actions.len()];
    assert!(analytic(&params, &g, &actions, &zeros, &zeros).iter().all(|&v| v == 0.0));
    let ones = vec![1.0; actions.len()];
    let single = analytic(&params, &g, &actions, &ones, &zeros);
    // Batches accumulate per-trajectory buffers, so a duplicate doubles exactly.
    let mut doubled = vec![0.0; params.len()];
    for _ in 0..2 {
        let g1 = analytic(&params, &g, &actions, &ones, &zeros);
        doubled.iter_mut().zip(&g1).for_each(|(d, v)| *d += v);
    }
    for (a, b) in single.iter().zip(&doubled) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn sampled_actions_are_never_forbidden() {
    use rand::Rng;
    let params = small(8, 8);
    let g = block(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let mut enc = encode(&params, &g);
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        while !env.state().done() {
            let sv = enc.decode_step(&params, env.state(), &g, 1.5).unwrap();
            let probs: Vec<f64> = enc.tape.value(sv.logp).data.iter().map(|l| l.exp()).collect();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = Some(j);
                    break;
                }
            }
            let a = pick.unwrap_or_else(|| sv.mask.iter().rposition(|&m| m).unwrap());
            assert!(sv.mask[a]);
            env.step(a).unwrap();
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let params = small(8, 9);
    let ck = Checkpoint::new(&params, 9, 3);
    let json = ck.to_json();
    let back = Checkpoint::from_json(&json).unwrap();
    assert_eq!(back.to_json(), json);
    assert_eq!(back.to_params().unwrap(), params);
    let mut bad = back.clone();
    bad.params.pop();
    assert!(bad.to_params().is_err());
}

#[test]
fn layout_is_stable() {
    let a = Layout::new(&PolicyDims::default());
    let b = Layout::new(&PolicyDims::default());
    assert_eq!(a, b);
    let names: Vec<_> = a.names().collect();
    assert_eq!(names.first(), Some(&"embed.w"));
    assert_eq!(names.last(), Some(&"ptr.alpha"));
    let mut off = 0;
    for n in a.names() {
        assert_eq!(a.slot(n).offset, off);
        off += a.slot(n).len();
    }
    assert_eq!(off, a.total());
    assert!(PolicyDims { d: 10, heads: 4, ..PolicyDims::default() }.validate().is_err());
}
