use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts co-clustered pairs by enumerating every instance pair.
fn paired_f_oracle(l: &[usize], g: &[usize]) -> f64 {
    let (mut pred, mut gold, mut both) = (0u64, 0u64, 0u64);
    for i in 0..l.len() {
        for j in i + 1..l.len() {
            let a = l[i] == l[j];
            let b = g[i] == g[j];
            pred += a as u64;
            gold += b as u64;
            both += (a && b) as u64;
        }
    }
    if pred == 0 && gold == 0 {
        return 1.0;
    }
    let p = if pred == 0 { 0.0 } else { both as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { both as f64 / gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Homogeneity/completeness from probabilities estimated by scanning the
/// instance lists, with entropies in base 2.
fn v_measure_oracle(l: &[usize], g: &[usize]) -> f64 {
    let n = l.len() as f64;
    let ks: std::collections::BTreeSet<usize> = l.iter().copied().collect();
    let cs: std::collections::BTreeSet<usize> = g.iter().copied().collect();
    let p = |f: &dyn Fn(usize) -> bool| (0..l.len()).filter(|&i| f(i)).count() as f64 / n;
    let h = |ps: Vec<f64>| -> f64 { ps.into_iter().filter(|&x| x > 0.0).map(|x| -x * x.log2()).sum() };
    let h_c = h(cs.iter().map(|&c| p(&|i| g[i] == c)).collect());
    let h_k = h(ks.iter().map(|&k| p(&|i| l[i] == k)).collect());
    let mut h_c_k = 0.0;
    let mut h_k_c = 0.0;
    for &k in &ks {
        for &c in &cs {
            let pkc = p(&|i| l[i] == k && g[i] == c);
            if pkc > 0.0 {
                h_c_k -= pkc * (pkc / p(&|i| l[i] == k)).log2();
                h_k_c -= pkc * (pkc / p(&|i| g[i] == c)).log2();
            }
        }
    }
    let hom = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_k / h_c };
    let com = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_c / h_k };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}

fn random_clustering(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[test]
fn paired_f_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let l = random_clustering(&mut rng, n);
        let g = random_clustering(&mut rng, n);
        assert_eq!(paired_f_score(&l, &g).unwrap(), paired_f_oracle(&l, &g), "{l:?} {g:?}");
    }
}

#[test]
fn v_measure_matches_entropy_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let l = random_clustering(&mut rng, n);
        let g = random_clustering(&mut rng, n);
        let (a, b) = (v_measure(&l, &g).unwrap(), v_measure_oracle(&l, &g));
        assert!((a - b).abs() < 1e-9, "{l:?} {g:?}: {a} vs {b}");
    }
}

#[test]
fn hard_metric_examples() {
    let l = ["a", "a", "b", "b"];
    let g = ["x", "x", "x", "y"];
    assert!((paired_f_score(&l, &g).unwrap() - 0.4).abs() < 1e-12);
    assert!((v_measure(&l, &g).unwrap() - v_measure_oracle(&[0, 0, 1, 1], &[0, 0, 0, 1])).abs() < 1e-12);
    assert_eq!(v_measure(&l, &l).unwrap(), 1.0);
    assert_eq!(paired_f_score(&l, &l).unwrap(), 1.0);
    assert_eq!(v_measure(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    assert_eq!(paired_f_score(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap(), 0.0);
    assert!(v_measure::<u8, u8>(&[], &[]).is_err());
    assert!(paired_f_score(&[0], &[0]).is_err());
}

fn m(pairs: &[(usize, f64)]) -> Membership {
    pairs.to_vec()
}

/// Fuzzy B-Cubed written out with dense label vectors.
fn fbc_oracle(l: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let ov = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x.min(*y)).sum::<f64>();
    let n = l.len();
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    for i in 0..n {
        let mut pv = Vec::new();
        let mut rv = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (ov(&l[i], &l[j]), ov(&g[i], &g[j]));
            if a > 0.0 {
                pv.push(a.min(b) / a);
            }
            if b > 0.0 {
                rv.push(a.min(b) / b);
            }
        }
        if !pv.is_empty() {
            ps.push(pv.iter().sum::<f64>() / pv.len() as f64);
        }
        if !rv.is_empty() {
            rs.push(rv.iter().sum::<f64>() / rv.len() as f64);
        }
    }
    let p = ps.iter().sum::<f64>() / ps.len() as f64;
    let r = rs.iter().sum::<f64>() / rs.len() as f64;
    2.0 * p * r / (p + r)
}

#[test]
fn fuzzy_b_cubed_examples() {
    let l = vec![m(&[(0, 0.7), (1, 0.3)]), m(&[(0, 1.0)]), m(&[(1, 0.6), (2, 0.4)])];
    let g = vec![m(&[(0, 1.0)]), m(&[(0, 0.5), (1, 0.5)]), m(&[(1, 1.0)])];
    let dense = |x: &[Membership]| -> Vec<Vec<f64>> {
        x.iter().map(|r| (0..3).map(|k| r.iter().find(|e| e.0 == k).map_or(0.0, |e| e.1)).collect()).collect()
    };
    let want = fbc_oracle(&dense(&l), &dense(&g));
    assert!((fuzzy_b_cubed(&l, &g).unwrap() - want).abs() < 1e-12);
    assert_eq!(fuzzy_b_cubed(&l, &l).unwrap(), 1.0);
    let l = vec![m(&[(0, 1.0)]), m(&[(0, 1.0)]), m(&[(1, 1.0)]), m(&[(1, 1.0)])];
    let g = vec![m(&[(0, 1.0)]), m(&[(1, 1.0)]), m(&[(0, 1.0)]), m(&[(1, 1.0)])];
    assert_eq!(fuzzy_b_cubed(&l, &g).unwrap(), 0.0);
}

#[test]
fn fuzzy_nmi_examples() {
    let l = vec![m(&[(0, 0.7), (1, 0.3)]), m(&[(0, 1.0)]), m(&[(1, 0.6), (2, 0.4)])];
    assert!((fuzzy_nmi(&l, &l).unwrap() - 1.0).abs() < 1e-12);
    // Product distribution: the labeling carries no information about gold.
    let k = vec![m(&[(0, 1.0)]), m(&[(0, 1.0)]), m(&[(1, 1.0)]), m(&[(1, 1.0)])];
    let c = vec![m(&[(0, 1.0)]), m(&[(1, 1.0)]), m(&[(0, 1.0)]), m(&[(1, 1.0)])];
    assert!(fuzzy_nmi(&k, &c).unwrap().abs() < 1e-6);
    // On hard labels it is the geometric-mean NMI.
    let hard = |x: &[usize]| x.iter().map(|&v| m(&[(v, 1.0)])).collect::<Vec<_>>();
    let a = [0usize, 0, 1, 1, 2];
    let b = [0usize, 0, 0, 1, 1];
    let ent = |x: &[usize]| {
        let mut c = std::collections::HashMap::new();
        x.iter().for_each(|v| *c.entry(v).or_insert(0.0) += 1.0);
        c.values().map(|&n: &f64| -(n / 5.0) * (n / 5.0).ln()).sum::<f64>()
    };
    let joint: Vec<usize> = a.iter().zip(&b).map(|(x, y)| x * 10 + y).collect();
    let mi = ent(&a) + ent(&b) - ent(&joint);
    let want = mi / (ent(&a) * ent(&b)).sqrt();
    assert!((fuzzy_nmi(&hard(&a), &hard(&b)).unwrap() - want).abs() < 1e-12);
}

#[test]
fn avg_reproduces_published_row() {
    assert!((avg(64.8, 23.0) - 38.6).abs() < 0.05);
}

#[test]
fn pseudoword_mapping_example() {
    let (acc, map) = pseudoword_accuracy(&[1, 1, 2, 2, 3, 3], &["a", "a", "b", "b", "a", "b"]).unwrap();
    assert!((acc - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(map[&1], "a");
    assert_eq!(map[&2], "b");
    let (acc, _) = pseudoword_accuracy(&[0, 0, 1, 1], &["x", "x", "y", "y"]).unwrap();
    assert_eq!(acc, 1.0);
}

proptest! {
    #[test]
    fn metrics_ignore_label_names(
        l in proptest::collection::vec(0usize..4, 2..12),
        g_seed in any::<u64>(),
        shift in 1usize..50,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
        let g: Vec<usize> = l.iter().map(|_| rng.random_range(0..3)).collect();
        let renamed: Vec<usize> = l.iter().map(|&x| (3 - x) * 7 + shift).collect();
        prop_assert_eq!(paired_f_score(&l, &g).unwrap(), paired_f_score(&renamed, &g).unwrap());
        prop_assert!((v_measure(&l, &g).unwrap() - v_measure(&renamed, &g).unwrap()).abs() < 1e-12);
        let hard = |x: &[usize]| x.iter().map(|&v| vec![(v, 1.0)]).collect::<Vec<_>>();
        let f1 = fuzzy_b_cubed(&hard(&l), &hard(&g)).unwrap();
        let f2 = fuzzy_b_cubed(&hard(&renamed), &hard(&g)).unwrap();
        prop_assert!((f1 - f2).abs() < 1e-12);
        let n1 = fuzzy_nmi(&hard(&l), &hard(&g)).unwrap();
        let n2 = fuzzy_nmi(&hard(&renamed), &hard(&g)).unwrap();
        prop_assert!((n1 - n2).abs() < 1e-9);
        for v in [f1, n1, paired_f_score(&l, &g).unwrap(), v_measure(&l, &g).unwrap()] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        let (acc, _) = pseudoword_accuracy(&l, &g).unwrap();
        let (acc2, _) = pseudoword_accuracy(&renamed, &g).unwrap();
        prop_assert_eq!(acc, acc2);
    }
}

fn li(id: &str, lemma: &str, labels: &[(&str, f64)]) -> LabeledInstance {
    LabeledInstance {
        id: id.into(),
        lemma: lemma.into(),
        labels: labels.iter().map(|(l, w)| (l.to_string(), *w)).collect(),
    }
}

#[test]
fn report_on_identical_labelings() {
    let gold = vec![
        li("a.1", "a", &[("a.x", 1.0)]),
        li("a.2", "a", &[("a.y", 1.0)]),
        li("a.3", "a", &[("a.x", 0.5), ("a.y", 0.5)]),
        li("b.1", "b", &[("b.x", 1.0)]),
        li("b.2", "b", &[("b.x", 1.0)]),
    ];
    for style in [TaskStyle::Hard2010, TaskStyle::Fuzzy2013] {
        let r = evaluate(&gold, &gold, style).unwrap();
        assert_eq!(r.corpus, (100.0, 100.0));
        assert_eq!(r.avg(), 100.0);
        let tsv = r.tsv();
        assert!(tsv.lines().all(|l| l.split('\t').count() == 3));
        assert!(tsv.contains(&format!("AVG\t{ALL}\t100")));
        assert!(r.table().contains(ALL));
    }
}

#[test]
fn report_avg_is_geometric_mean() {
    let gold = vec![li("1", "w", &[("x", 1.0)]), li("2", "w", &[("x", 1.0)]), li("3", "w", &[("y", 1.0)])];
    let lab = vec![li("1", "w", &[("p", 1.0)]), li("2", "w", &[("q", 1.0)]), li("3", "w", &[("q", 1.0)])];
    let r = evaluate(&lab, &gold, TaskStyle::Hard2010).unwrap();
    assert!((r.avg().powi(2) - r.corpus.0 * r.corpus.1).abs() < 1e-9);
}

#[test]
fn mismatched_ids_list_first_ten() {
    let gold: Vec<_> = (0..15).map(|i| li(&format!("g{i}"), "w", &[("x", 1.0)])).collect();
    let lab: Vec<_> = (0..15).map(|i| li(&format!("l{i}"), "w", &[("x", 1.0)])).collect();
    match evaluate(&lab, &gold, TaskStyle::Hard2010) {
        Err(MetricError::Mismatch { total, first }) => {
            assert_eq!(total, 30);
            assert_eq!(first.len(), 10);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn labeling_file_format() {
    let text = "i1\tbank\tbank.0/0.7,bank.2/0.3\ni2\tbank\tbank.1\n";
    let r = read_labeling(text.as_bytes()).unwrap();
    assert_eq!(r[0].labels, vec![("bank.0".to_string(), 0.7), ("bank.2".to_string(), 0.3)]);
    assert_eq!(r[1].labels, vec![("bank.1".to_string(), 1.0)]);
    assert_eq!(r[0].top_label(), "bank.0");
    assert!(read_labeling("i1\tbank\tbank.0/-1\n".as_bytes()).is_err());
    assert!(read_labeling("i1\tbank\n".as_bytes()).is_err());
    assert!(read_labeling("i1\tb\tx\ni1\tb\tx\n".as_bytes()).is_err());
}
