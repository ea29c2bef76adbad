//! The assembled model against a loop-by-loop reimplementation that reads
//! the same parameters by name.

use candle_core::DType;
use segpoint::data::standard_vocabulary;
use segpoint::gem::kernel_offsets;
use segpoint::geometry::{farthest_point_sample, squared_distance};
use segpoint::gradcheck::{random_cloud, tiny_model_config};
use segpoint::lm::vocab::{BOS, EOS, POINT, SEG};
use segpoint::nn::to_f64_vec2;
use segpoint::{ModelConfig, Point3, PointCloud, SegPoint};

type Mat = Vec<Vec<f64>>;

const TOL: f64 = 1e-9;

struct Params<'a>(&'a SegPoint);

impl Params<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.0.store.values_f64(name).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn mat(&self, name: &str) -> Mat {
        let var = self.0.store.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let cols = var.dims()[var.dims().len() - 1];
        self.vec(name).chunks(cols).map(|c| c.to_vec()).collect()
    }

    fn try_vec(&self, name: &str) -> Option<Vec<f64>> {
        self.0.store.get(name).map(|_| self.vec(name))
    }

    fn linear(&self, prefix: &str, x: &Mat) -> Mat {
        let w = self.mat(&format!("{prefix}.weight"));
        let b = self.try_vec(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|o| {
                        let s: f64 = row.iter().zip(&w).map(|(v, wr)| v * wr[o]).sum();
                        s + b.as_ref().map_or(0.0, |b| b[o])
                    })
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, prefix: &str, x: &Mat) -> Mat {
        let g = self.vec(&format!("{prefix}.gamma"));
        let b = self.vec(&format!("{prefix}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn attention(&self, prefix: &str, x: &Mat, heads: usize, causal: bool) -> Mat {
        let q = self.linear(&format!("{prefix}.q"), x);
        let k = self.linear(&format!("{prefix}.k"), x);
        let v = self.linear(&format!("{prefix}.v"), x);
        let t = x.len();
        let d = x[0].len();
        let hd = d / heads;
        let mut ctx = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            for i in 0..t {
                let limit = if causal { i + 1 } else { t };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (hd as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (j, wj) in w.iter().enumerate() {
                    for c in r.clone() {
                        ctx[i][c] += wj * v[j][c];
                    }
                }
            }
        }
        self.linear(&format!("{prefix}.out"), &ctx)
    }

    fn transformer(&self, prefix: &str, x: &Mat, heads: usize, causal: bool) -> Mat {
        let a = self.attention(&format!("{prefix}.attn"), &self.layer_norm(&format!("{prefix}.norm1"), x), heads, causal);
        let x = add(x, &a);
        let up = relu(&self.linear(&format!("{prefix}.ffn.up"), &self.layer_norm(&format!("{prefix}.norm2"), &x)));
        add(&x, &self.linear(&format!("{prefix}.ffn.down"), &up))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn concat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn nearest(q: &Point3, refs: &[Point3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, r)| (squared_distance(q, r), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn idw(src_xyz: &[Point3], src: &Mat, dst_xyz: &[Point3], k: usize, eps: f64) -> Mat {
    dst_xyz
        .iter()
        .map(|p| {
            let nb = nearest(p, src_xyz, k);
            let w: Vec<f64> = nb.iter().map(|&j| 1.0 / (squared_distance(p, &src_xyz[j]).sqrt() + eps)).collect();
            let z: f64 = w.iter().sum();
            (0..src[0].len())
                .map(|c| nb.iter().zip(&w).map(|(&j, wj)| wj * src[j][c]).sum::<f64>() / z)
                .collect()
        })
        .collect()
}

fn attend(centers_xyz: &[Point3], centers: &Mat, src_xyz: &[Point3], src: &Mat, k: usize) -> Mat {
    centers_xyz
        .iter()
        .zip(centers)
        .map(|(p, c)| {
            let nb = nearest(p, src_xyz, k);
            let scores: Vec<f64> = nb.iter().map(|&j| dot(c, &src[j]) / (c.len() as f64).sqrt()).collect();
            let w = softmax(&scores);
            (0..c.len())
                .map(|i| c[i] + nb.iter().zip(&w).map(|(&j, wj)| wj * src[j][i]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn gated(f: &Mat, g: &Mat, gate: f64) -> Mat {
    let d = f[0].len() as f64;
    f.iter()
        .map(|row| {
            let w = softmax(&g.iter().map(|gr| dot(row, gr) / d.sqrt()).collect::<Vec<_>>());
            (0..row.len())
                .map(|c| row[c] + gate * g.iter().zip(&w).map(|(gr, wj)| wj * gr[c]).sum::<f64>())
                .collect()
        })
        .collect()
}

struct Reference {
    blocks: Vec<Mat>,
    f_p: Mat,
    h_seg: Mat,
    logits: Mat,
}

fn reference(model: &SegPoint, cloud: &PointCloud, ids: &[u32]) -> Reference {
    let p = Params(model);
    let cfg: &ModelConfig = &model.config;
    let xyz = cloud.coords_f64();
    let n = xyz.len();
    let feats: Mat = (0..n).map(|i| cloud.feat_row(i).iter().map(|&v| v as f64).collect()).collect();

    // Geometric stem.
    let offsets = kernel_offsets(cfg.stem.kernel_points, cfg.stem.sigma);
    let nk = cfg.stem.neighbor_k.min(n);
    let neighbours: Vec<Vec<usize>> = xyz.iter().map(|q| nearest(q, &xyz, nk)).collect();
    let mut g = feats.clone();
    for b in 0..3 {
        let kernel = p.vec(&format!("stem.block{b}.kernel"));
        let d_in = g[0].len();
        let d_out = cfg.stem.channels[b];
        let mut out = vec![vec![0.0; d_out]; n];
        for c in 0..n {
            for (kk, kappa) in offsets.iter().enumerate() {
                for &j in &neighbours[c] {
                    let d: f64 = (0..3).map(|a| (xyz[j][a] - xyz[c][a] - kappa[a]).powi(2)).sum::<f64>().sqrt();
                    let h = (1.0 - d / cfg.stem.sigma).max(0.0);
                    if h == 0.0 {
                        continue;
                    }
                    for i in 0..d_in {
                        for o in 0..d_out {
                            out[c][o] += h * g[j][i] * kernel[(kk * d_in + i) * d_out + o];
                        }
                    }
                }
            }
        }
        g = relu(&p.layer_norm(&format!("stem.block{b}.norm"), &out));
    }

    // Encoder with geometric injection.
    let ec = &cfg.encoder;
    let tokens = farthest_point_sample(&xyz, ec.n_tokens, 0).unwrap().indices;
    let token_xyz: Vec<Point3> = tokens.iter().map(|&i| xyz[i]).collect();
    let gates = p.vec("gem.gates");
    let mut x: Mat = token_xyz
        .iter()
        .map(|c| {
            let group = nearest(c, &xyz, ec.group_k.min(n));
            let rows: Mat = group
                .iter()
                .map(|&j| {
                    let mut r: Vec<f64> = (0..3).map(|a| xyz[j][a] - c[a]).collect();
                    r.extend_from_slice(&xyz[j]);
                    r.extend_from_slice(&feats[j]);
                    r
                })
                .collect();
            let e = p.linear("encoder.embed", &rows);
            (0..ec.dim).map(|o| e.iter().map(|r| r[o]).fold(f64::NEG_INFINITY, f64::max)).collect()
        })
        .collect();
    let mut blocks = Vec::new();
    for b in 0..ec.blocks {
        for l in 0..ec.layers_per_block {
            x = p.transformer(&format!("encoder.block{b}.layer{l}"), &x, ec.heads, false);
        }
        x = gated(&x, &g, gates[b]);
        blocks.push(x.clone());
    }

    // Language model over the expanded sequence.
    let lc = &cfg.lm;
    let slot = ids.iter().position(|&t| t == POINT).unwrap();
    let embed = p.mat("lm.token_embed");
    let pos = p.mat("lm.pos_embed");
    let point_rows = p.linear("lm.point_in", &blocks[ec.blocks - 1]);
    let mut seq: Mat = Vec::new();
    let mut expanded = Vec::new();
    for (i, &t) in ids.iter().enumerate() {
        if i == slot {
            seq.extend(point_rows.iter().cloned());
            expanded.extend(std::iter::repeat_n(POINT, point_rows.len()));
        } else {
            seq.push(embed[t as usize].clone());
            expanded.push(t);
        }
    }
    let mut h: Mat = seq.iter().enumerate().map(|(t, r)| r.iter().zip(&pos[t]).map(|(a, b)| a + b).collect()).collect();
    for l in 0..lc.layers {
        h = p.transformer(&format!("lm.layer{l}"), &h, lc.heads, true);
    }
    let hidden = p.layer_norm("lm.final_norm", &h);
    let logits = p.linear("lm.head", &hidden);
    let seg_rows: Mat = expanded
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == SEG)
        .map(|(i, _)| hidden[i].clone())
        .collect();
    let h_seg = p.linear("lm.seg_proj.fc2", &relu(&p.linear("lm.seg_proj.fc1", &seg_rows)));
    let h_point = p.linear("lm.point_out", &hidden[slot..slot + point_rows.len()].to_vec());

    // Propagation chain.
    let gc = &cfg.gfp;
    let (n2, n3) = model.level_sizes(n).unwrap();
    let i3 = farthest_point_sample(&xyz, n3, 0).unwrap().indices;
    let i2 = &i3[..n2];
    let c3: Vec<Point3> = i3.iter().map(|&i| xyz[i]).collect();
    let c2: Vec<Point3> = i2.iter().map(|&i| xyz[i]).collect();
    let b = ec.blocks;
    let up3 = idw(&token_xyz, &blocks[b - 3], &c3, gc.idw_k, gc.eps);
    let up4 = idw(&token_xyz, &blocks[b - 2], &c2, gc.idw_k, gc.eps);
    let geo3: Mat = i3.iter().map(|&i| g[i].clone()).collect();
    let geo2: Mat = i2.iter().map(|&i| g[i].clone()).collect();
    let t3 = relu(&p.linear("gfp.fuse3", &concat(&up3, &geo3)));
    let t4 = relu(&p.linear("gfp.fuse4", &concat(&up4, &geo2)));
    let t5 = p.linear("gfp.fuse5", &concat(&blocks[b - 1], &h_point));
    let at2 = attend(&c2, &t4, &token_xyz, &t5, gc.k);
    let at3 = attend(&c3, &t3, &c2, &at2, gc.k);
    let f_p = attend(&xyz, &g, &c3, &at3, gc.k);

    Reference {
        blocks,
        f_p,
        h_seg,
        logits,
    }
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn model_with_open_gates(seed: u64) -> SegPoint {
    let model = SegPoint::new(&tiny_model_config(), standard_vocabulary(), 3, DType::F64, seed).unwrap();
    let gates: Vec<f64> = (0..model.config.encoder.blocks).map(|b| 0.4 + 0.1 * b as f64).collect();
    model.store.assign_f64("gem.gates", gates).unwrap();
    model
}

fn sample_ids(model: &SegPoint) -> Vec<u32> {
    let v = &model.vocab;
    let mut ids = vec![BOS];
    ids.extend(v.tokenize("USER: <POINT> Can you segment the chair category in this point cloud? ASSISTANT:"));
    ids.extend(v.tokenize("chair <SEG>, table <SEG>."));
    ids.push(EOS);
    ids
}

#[test]
fn full_forward_matches_loop_reference() {
    for seed in [1, 2] {
        let model = model_with_open_gates(seed);
        let cloud = random_cloud(48, 3, seed + 10).unwrap();
        let ids = sample_ids(&model);
        let want = reference(&model, &cloud, &ids);

        let prep = model.prepare(&cloud).unwrap();
        let side = model.encode_points(&prep).unwrap();
        for (b, t) in side.blocks.per_block.iter().enumerate() {
            let d = max_diff(&to_f64_vec2(t).unwrap(), &want.blocks[b]);
            assert!(d < TOL, "encoder block {b}: {d:e}");
        }
        let seq = model.lm.inject_point_tokens(&ids, side.blocks.last()).unwrap();
        let (_, logits) = model.lm.forward(&seq.embeds).unwrap();
        let d = max_diff(&to_f64_vec2(&logits).unwrap(), &want.logits);
        assert!(d < TOL, "lm logits: {d:e}");

        let (h_seg, f_p) = model.teacher_forced_masks(&prep, &ids).unwrap();
        assert_eq!(h_seg.len(), 2);
        let d = max_diff(&to_f64_vec2(h_seg.values.as_ref().unwrap()).unwrap(), &want.h_seg);
        assert!(d < TOL, "h_seg: {d:e}");
        let d = max_diff(&to_f64_vec2(&f_p.values).unwrap(), &want.f_p);
        assert!(d < TOL, "f_P: {d:e}");
    }
}

#[test]
fn gate_zero_encoder_ignores_geometry() {
    let model = SegPoint::new(&tiny_model_config(), standard_vocabulary(), 3, DType::F64, 4).unwrap();
    let cloud = random_cloud(40, 3, 4).unwrap();
    let prep = model.prepare(&cloud).unwrap();
    let with = model.encode_points(&prep).unwrap();
    let without = model.encoder.encode(&prep.tokens, None).unwrap();
    for (a, b) in with.blocks.per_block.iter().zip(&without.per_block) {
        assert_eq!(to_f64_vec2(a).unwrap(), to_f64_vec2(b).unwrap());
    }
}
