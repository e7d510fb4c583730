//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
//! budget. Exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::Rng;
use tada_cli::cli_main;
use tada_core::ablation::{ablate_frobenius, AblationMethod, MethodTag};
use tada_core::cache::Side;
use tada_core::quant::{pack_codes, unpack_codes};
use tada_core::search::{candidate_pool, score_plan};
use tada_core::synthetic::{gaussian_from, rng, shared_outlier_activations, SharedOutlierSpec};
use tada_core::{
    apply_rope, attend_naive, attend_streaming, compress_block, deserialize_cache, load_weights, matmul,
    project_compress, quantize_tensor, random_search, rope_compress, save_weights, serialize_cache, BitWidth,
    BlockSpec, CalibrationSet, LayerCache, PrecisionPlan, ReferenceDecoder, RopeParams, SearchConfig, Tensor,
    ToyConfig, ToyModel, WeightSpec,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli_main(std::iter::once("tada").chain(args.iter().copied()), &mut out, &mut err);
    check(code == 0, || format!("exit {code}: {}", String::from_utf8_lossy(&err)))?;
    Ok(String::from_utf8(out).unwrap())
}

fn ratio_line(out: &str) -> Result<f64, String> {
    out.lines()
        .find_map(|l| l.strip_prefix("memory_ratio "))
        .ok_or("no memory_ratio line")?
        .parse()
        .map_err(e)
}

fn memory_formula() -> Outcome {
    let base = ["memory", "--layers", "32", "--kv-heads", "32", "--head-dim", "128", "--plan"];
    let uniform = ratio_line(&cli(&[&base[..], &["uniform:4"]].concat())?)?;
    check(uniform == 0.296875, || format!("uniform 4-bit printed {uniform}"))?;
    let mixed = [vec!["4"; 24], vec!["2"; 8]].concat().join(",");
    let split = ratio_line(&cli(&[&base[..], &[mixed.as_str()]].concat())?)?;
    check(split == 0.265625, || format!("24x4 + 8x2 printed {split}"))?;
    check((split - 0.27).abs() <= 0.01, || format!("{split} is not within 0.01 of 0.27"))?;
    Ok(format!("uniform-4 {uniform}, 24x4+8x2 {split}"))
}

fn quantizer_bound() -> Outcome {
    const GROUPS: usize = 100_000;
    const D: usize = 32;
    let mut r = rng(20);
    let mut worst_slack = f32::INFINITY;
    for bits in BitWidth::QUANTIZED {
        let x = gaussian_from(&mut r, vec![GROUPS, 1, D], 1.0);
        let q = quantize_tensor(&x, bits).map_err(e)?;
        let mut out = vec![0.0f32; D];
        for g in 0..GROUPS {
            let codes = q.group_codes(g).map_err(e)?;
            check(codes.iter().all(|&c| c as u32 <= bits.max_code()), || format!("{bits}-bit group {g}: code out of range"))?;
            q.dequantize_group_into(g, &mut out);
            let bound = q.scales()[g] / 2.0 + 1e-6;
            for (&v, &h) in x.row(g).iter().zip(&out) {
                let err = (v - h).abs();
                check(err <= bound, || format!("{bits}-bit group {g}: |x - x^| = {err} > {bound}"))?;
                worst_slack = worst_slack.min(bound - err);
            }
        }
        // Pack/unpack bijectivity on random code vectors of every length up to 3 groups.
        for len in 1..=3 * D {
            let codes: Vec<u8> = (0..len).map(|_| r.random_range(0..=bits.max_code()) as u8).collect();
            let packed = pack_codes(&codes, bits).map_err(e)?;
            check(packed.len() == (len * bits.bits() as usize).div_ceil(8), || format!("{bits}-bit packed length"))?;
            check(unpack_codes(&packed, bits, len).map_err(e)? == codes, || format!("{bits}-bit unpack(pack) at len {len}"))?;
        }
        // Every byte decodes to in-range codes that re-pack to the same byte.
        let per_byte = 8 / bits.bits() as usize;
        for byte in 0..=255u8 {
            let codes = unpack_codes(&[byte], bits, per_byte).map_err(e)?;
            check(codes.iter().all(|&c| c as u32 <= bits.max_code()), || "unpacked code out of range".into())?;
            check(pack_codes(&codes, bits).map_err(e)? == [byte], || format!("{bits}-bit byte {byte:#04x} not bijective"))?;
        }
    }
    Ok(format!("{GROUPS} groups x 3 widths, min slack {worst_slack:.2e}"))
}

fn lossless_degeneracies() -> Outcome {
    let mut r = rng(30);
    for bits in BitWidth::ALL {
        for residual in [0, 1, 5, 16] {
            let k = shared_outlier_activations(&mut r, 37, 4, 16, &SharedOutlierSpec::identical_heads());
            let v = shared_outlier_activations(&mut r, 37, 4, 16, &SharedOutlierSpec::identical_heads());
            let mut c = LayerCache::new(4, 16, residual, bits);
            for t in 0..37 {
                let row = |x: &Tensor| Tensor::new(vec![1, 4, 16], x.data()[t * 64..(t + 1) * 64].to_vec()).unwrap();
                c.append_tokens(&row(&k), &row(&v)).map_err(e)?;
            }
            for h in 0..4 {
                let (kh, vh) = c.reconstruct(h).map_err(e)?;
                for t in 0..37 {
                    check(kh.row(t) == k.row(t * 4 + h) && vh.row(t) == v.row(t * 4 + h), || {
                        format!("{bits}-bit, R={residual}: head {h} token {t} not bit-exact")
                    })?;
                }
            }
        }
    }
    let mut runs = 0;
    for seed in 0..3u64 {
        let model = ToyModel::synthetic(ToyConfig::toy(), &WeightSpec::new(seed)).map_err(e)?;
        let prompt: Vec<u32> = (0..8).map(|_| r.random_range(0..256)).collect();
        let reference = ReferenceDecoder::generate(&model, &prompt, 64).map_err(e)?;
        for bits in BitWidth::ALL {
            let plan = PrecisionPlan::uniform(4, bits);
            let out = model.generate(&prompt, 64, &plan, 128, BlockSpec::default()).map_err(e)?;
            check(out == reference, || format!("seed {seed}, {bits}-bit, R=128 differs from the reference decoder"))?;
            runs += 1;
        }
    }
    Ok(format!("identical heads exact at 4 widths x 4 residual lengths; {runs} 64-token runs match reference"))
}

fn streaming_equivalence() -> Outcome {
    let mut worst = 0.0f32;
    let mut caches = 0;
    for seed in 0..120u64 {
        let mut r = rng(400 + seed);
        let kv = [1, 2, 4][r.random_range(0..3)];
        let q_heads = kv * [1, 2, 4][r.random_range(0..3)];
        let d = [8, 16, 32][r.random_range(0..3)];
        let bits = BitWidth::ALL[r.random_range(0..4)];
        let residual = r.random_range(0..16);
        let tokens = r.random_range(1..150);
        let (k, v) = if seed % 2 == 0 {
            (gaussian_from(&mut r, vec![tokens, kv, d], 1.0), gaussian_from(&mut r, vec![tokens, kv, d], 1.0))
        } else {
            let spec = SharedOutlierSpec::default();
            (shared_outlier_activations(&mut r, tokens, kv, d, &spec), shared_outlier_activations(&mut r, tokens, kv, d, &spec))
        };
        let mut c = LayerCache::new(kv, d, residual, bits);
        let mut start = 0;
        while start < tokens {
            let n = r.random_range(1..=tokens - start);
            let slice = |x: &Tensor| Tensor::new(vec![n, kv, d], x.data()[start * kv * d..(start + n) * kv * d].to_vec()).unwrap();
            c.append_tokens(&slice(&k), &slice(&v)).map_err(e)?;
            start += n;
        }
        let q = gaussian_from(&mut r, vec![q_heads, d], 1.0);
        let naive = attend_naive(&q, &c, false).map_err(e)?.output;
        for bt in [1, 2, 3, 5, 8, 64, tokens, tokens + 7] {
            let s = attend_streaming(&q, &c, BlockSpec::new(bt).map_err(e)?).map_err(e)?.output;
            let diff = s.max_abs_diff(&naive);
            worst = worst.max(diff);
            check(diff <= 1e-5, || {
                format!(
                    "seed {seed}: block {bt}, {tokens} tokens ({} compressed, {} residual), {q_heads}/{kv} heads: diff {diff}",
                    c.compressed_tokens(),
                    c.residual_count()
                )
            })?;
        }
        caches += 1;
    }
    Ok(format!("{caches} caches x 8 block sizes, max diff {worst:.2e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn precision_ordering() -> Outcome {
    let spec = SharedOutlierSpec {
        head_noise: 0.5,
        ..SharedOutlierSpec::default()
    };
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for seed in 0..60u64 {
        let mut r = rng(500 + seed);
        let (tokens, kv, hq, d) = (64, 2, 8, 16);
        let k = shared_outlier_activations(&mut r, tokens, kv, d, &spec);
        let v = shared_outlier_activations(&mut r, tokens, kv, d, &spec);
        let q = gaussian_from(&mut r, vec![hq, d], 1.0);
        let mut exact = LayerCache::new(kv, d, tokens + 1, BitWidth::Sixteen);
        exact.append_tokens(&k, &v).map_err(e)?;
        let oracle = attend_naive(&q, &exact, false).map_err(e)?.output;
        for (i, bits) in BitWidth::ALL.into_iter().enumerate() {
            let mut c = LayerCache::new(kv, d, 8, bits);
            c.append_tokens(&k, &v).map_err(e)?;
            let out = attend_streaming(&q, &c, BlockSpec::default()).map_err(e)?.output;
            errors[i].push(out.frobenius_distance(&oracle).map_err(e)?);
        }
    }
    let medians: Vec<f64> = errors.into_iter().map(median).collect();
    check(medians.windows(2).all(|w| w[1] <= w[0]), || format!("medians not non-increasing: {medians:?}"))?;
    Ok(format!(
        "60 instances, median error 2/4/8/16-bit = {:.3e} / {:.3e} / {:.3e} / {:.3e}",
        medians[0], medians[1], medians[2], medians[3]
    ))
}

fn outlier_robustness() -> Outcome {
    let mut cfg = ToyConfig::toy();
    cfg.model.plan = PrecisionPlan::uniform(4, BitWidth::Four);
    let mut wins = 0;
    let mut layers = 0;
    for seed in 0..100u64 {
        let model = ToyModel::synthetic(cfg.clone(), &WeightSpec::new(seed)).map_err(e)?;
        let calib = CalibrationSet::synthetic(1000 + seed, 1, 32, cfg.vocab_size).map_err(e)?;
        let plan = PrecisionPlan::uniform(4, BitWidth::Four);
        let methods = [
            AblationMethod {
                tag: MethodTag::Tada,
                plan: plan.clone(),
            },
            AblationMethod {
                tag: MethodTag::Direct,
                plan,
            },
        ];
        let records = ablate_frobenius(&model, &calib, &methods).map_err(e)?;
        let (tada, direct) = records.split_at(4);
        for (t, d) in tada.iter().zip(direct) {
            layers += 1;
            wins += (t.frobenius_k + t.frobenius_v < d.frobenius_k + d.frobenius_v) as usize;
        }
    }
    let frac = wins as f64 / layers as f64;
    check(frac >= 0.9, || format!("centered error lower in {wins}/{layers} layers"))?;
    Ok(format!("centered error lower in {wins}/{layers} layers ({:.1}%)", 100.0 * frac))
}

fn search_dominance() -> Outcome {
    let model = ToyModel::synthetic(ToyConfig::toy(), &WeightSpec::new(70)).map_err(e)?;
    let calib = CalibrationSet::sampled(&model, 71, 4, 32).map_err(e)?;
    let search = SearchConfig {
        num_candidates: 32,
        seed: 72,
        ..SearchConfig::default()
    };
    let (best, report) = random_search(&search, &calib, &model).map_err(e)?;
    let best_score = score_plan(&model, &best, &calib).map_err(e)?;
    check(best_score == report.best().score, || "best plan rescored differently".into())?;
    for bits in BitWidth::QUANTIZED {
        let s = score_plan(&model, &PrecisionPlan::uniform(4, bits), &calib).map_err(e)?;
        check(best_score <= s, || format!("best {best_score} worse than uniform {bits}-bit {s}"))?;
    }
    let pool = candidate_pool(&search, 4).map_err(e)?;
    check(pool.len() == report.candidates.len(), || "report does not cover the pool".into())?;
    let (again_best, again) = random_search(&search, &calib, &model).map_err(e)?;
    check(again_best == best, || "best plan differs between runs".into())?;
    check(again.to_json().as_bytes() == report.to_json().as_bytes(), || "JSON reports differ".into())?;
    check(again.to_csv().as_bytes() == report.to_csv().as_bytes(), || "CSV reports differ".into())?;
    Ok(format!(
        "{} candidates, best {} (plan {}) score {best_score:.6}; reports byte-identical",
        report.candidates.len(),
        report.best_index,
        best
    ))
}

fn fusion_equivalence() -> Outcome {
    let mut cases = 0;
    for seed in 0..120u64 {
        let mut r = rng(800 + seed);
        let heads = r.random_range(1..5);
        let d = 2 * r.random_range(1..17);
        let tokens = r.random_range(1..12);
        let bits = BitWidth::ALL[seed as usize % 4];
        let rope = RopeParams::new(d, [10_000.0, 500_000.0][r.random_range(0..2)]).map_err(e)?;
        let keys = gaussian_from(&mut r, vec![tokens, heads, d], 2.0);
        let positions: Vec<usize> = (0..tokens).map(|_| r.random_range(0..8192)).collect();
        let fused = rope_compress(&keys, &positions, &rope, bits).map_err(e)?;
        let plain = compress_block(&apply_rope(&keys, &positions, &rope).map_err(e)?, bits).map_err(e)?;
        check(fused == plain, || format!("seed {seed}: rope_compress differs"))?;

        let model_dim = r.random_range(1..64);
        let x = gaussian_from(&mut r, vec![tokens, model_dim], 1.0);
        let w = gaussian_from(&mut r, vec![model_dim, heads * d], 0.5);
        let fused = project_compress(&x, &w, heads, d, bits).map_err(e)?;
        let v = matmul(&x, &w).map_err(e)?.reshape(vec![tokens, heads, d]).map_err(e)?;
        check(fused == compress_block(&v, bits).map_err(e)?, || format!("seed {seed}: project_compress differs"))?;
        cases += 2;
    }
    // End to end: decoding with R = 0 takes the fused path. Layer 0 sees the
    // same inputs as a full uncompressed pass, so its cache must equal
    // compressing that pass's keys and values in one go. Deeper layers only
    // match when attention is lossless, as with identical KV heads.
    let tokens: Vec<u32> = (0..24).map(|i| (i * 37 % 256) as u32).collect();
    for (spec, layers) in [(WeightSpec::new(81), 1), (WeightSpec::identical_heads(82), 4)] {
        let model = ToyModel::synthetic(ToyConfig::toy(), &spec).map_err(e)?;
        let full = model.forward_full(&tokens).map_err(e)?;
        for bits in BitWidth::ALL {
            let plan = PrecisionPlan::uniform(4, bits);
            let mut caches = model.new_caches(&plan, 0).map_err(e)?;
            for (pos, &t) in tokens.iter().enumerate() {
                model.decode_step(&mut caches, t, pos, BlockSpec::default()).map_err(e)?;
            }
            for (l, c) in caches.iter().enumerate().take(layers) {
                let mut two_step = LayerCache::new(2, 16, 0, bits);
                two_step.append_tokens(&full.keys[l], &full.values[l]).map_err(e)?;
                check(*c == two_step, || format!("{bits}-bit layer {l}: decode cache differs"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} fused/unfused comparisons bitwise equal"))
}

fn serialization() -> Outcome {
    let mut r = rng(900);
    let mut caches = 0;
    for seed in 0..40u64 {
        let heads = r.random_range(1..4);
        let d = r.random_range(1..20);
        let residual = r.random_range(0..6);
        let tokens = r.random_range(0..30);
        let bits = BitWidth::ALL[seed as usize % 4];
        let mut c = LayerCache::new(heads, d, residual, bits);
        if tokens > 0 {
            let k = gaussian_from(&mut r, vec![tokens, heads, d], 3.0);
            let v = gaussian_from(&mut r, vec![tokens, heads, d], 3.0);
            c.append_tokens(&k, &v).map_err(e)?;
        }
        let bytes = serialize_cache(&c);
        let back = deserialize_cache(&bytes).map_err(e)?;
        check(back == c && serialize_cache(&back) == bytes, || format!("seed {seed}: cache round trip not exact"))?;
        check(back.residual(Side::Key) == c.residual(Side::Key), || "residual differs".into())?;
        for cut in 0..bytes.len() {
            check(deserialize_cache(&bytes[..cut]).is_err(), || format!("seed {seed}: truncation at {cut} accepted"))?;
        }
        let mut extra = bytes.clone();
        extra.push(0);
        check(deserialize_cache(&extra).is_err(), || "trailing byte accepted".into())?;
        for (pos, val) in [(0usize, b'X'), (6, b'9'), (19, 3), (19, 32)] {
            let mut bad = bytes.clone();
            bad[pos] = val;
            check(deserialize_cache(&bad).is_err(), || format!("corrupt byte {pos} accepted"))?;
        }
        let mut bad = bytes.clone();
        bad[20..28].copy_from_slice(&(c.compressed_tokens() as u64 + 1).to_le_bytes());
        check(deserialize_cache(&bad).is_err(), || "inflated token count accepted".into())?;
        caches += 1;
    }
    let mut weights = 0;
    for seed in 0..3u64 {
        let model = ToyModel::synthetic(ToyConfig::toy(), &WeightSpec::new(seed)).map_err(e)?;
        let bytes = save_weights(&model);
        let back = load_weights(&bytes).map_err(e)?;
        check(back == model && save_weights(&back) == bytes, || "weight round trip not exact".into())?;
        let step = (bytes.len() / 997).max(1);
        for cut in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
            check(load_weights(&bytes[..cut]).is_err(), || format!("weights truncated at {cut} accepted"))?;
        }
        let mut bad = bytes.clone();
        bad[7] ^= 1;
        check(load_weights(&bad).is_err(), || "bad version accepted".into())?;
        let mut bad = bytes.clone();
        bad[20] = b'#';
        check(load_weights(&bad).is_err(), || "corrupt manifest accepted".into())?;
        weights += 1;
    }
    Ok(format!("{caches} caches (every truncation) and {weights} weight files"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "memory-formula", budget: Duration::from_secs(1), run: memory_formula },
        Criterion { id: 2, name: "quantizer-round-trip-bound", budget: Duration::from_secs(30), run: quantizer_bound },
        Criterion { id: 3, name: "lossless-degeneracies", budget: Duration::from_secs(60), run: lossless_degeneracies },
        Criterion { id: 4, name: "streaming-oracle-equivalence", budget: Duration::from_secs(120), run: streaming_equivalence },
        Criterion { id: 5, name: "precision-ordering", budget: Duration::from_secs(120), run: precision_ordering },
        Criterion { id: 6, name: "outlier-robustness", budget: Duration::from_secs(180), run: outlier_robustness },
        Criterion { id: 7, name: "search-dominance-determinism", budget: Duration::from_secs(180), run: search_dominance },
        Criterion { id: 8, name: "fusion-behavior-preservation", budget: Duration::from_secs(30), run: fusion_equivalence },
        Criterion { id: 9, name: "serialization", budget: Duration::from_secs(10), run: serialization },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("over time budget {:?}; {detail}", c.budget)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {} {} ({:.2} s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
