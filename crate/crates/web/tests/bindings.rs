use filtrank::dataset::pair_design;
use filtrank::filters::{apply_filter, test_chart, FilterId};
use filtrank::imagecore::Image;
use filtrank_web::*;

fn chart_rgba(side: usize) -> Vec<u8> {
    test_chart(side)
        .to_rgb8()
        .chunks_exact(3)
        .enumerate()
        .flat_map(|(i, c)| [c[0], c[1], c[2], (i % 256) as u8])
        .collect()
}

#[test]
fn names_and_pairs() {
    let names = filter_names();
    assert_eq!(names.len(), 22);
    let pairs = design_pairs();
    assert_eq!(pairs.len(), 33);
    assert_eq!(pairs.join("\n") + "\n", pair_design().to_text());
}

#[test]
fn rgba_filter_matches_library() {
    let rgba = chart_rgba(16);
    for name in filter_names() {
        let out = apply_filter_rgba(&rgba, 16, 16, &name).unwrap();
        let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        let img = Image::from_rgb8(16, 16, &rgb).unwrap();
        let want = apply_filter(&img, FilterId::from_name(&name).unwrap()).to_rgb8();
        let got: Vec<u8> = out.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        assert_eq!(got, want, "{name}");
        assert!(out.chunks_exact(4).zip(rgba.chunks_exact(4)).all(|(a, b)| a[3] == b[3]));
    }
    assert!(apply_filter_rgba(&rgba, 15, 16, "Inkwell").is_err());
    assert!(apply_filter_rgba(&rgba, 16, 16, "Nope").is_err());
}

#[test]
fn votes_score_like_a_tournament() {
    // Left always wins: each filter's score is (#times left) - (#times right).
    let votes = "L".repeat(33);
    let scores = score_votes(&votes).unwrap();
    let mut expected = [0i32; 22];
    for (a, b) in pair_design().edges() {
        expected[a.index()] += 1;
        expected[b.index()] -= 1;
    }
    assert_eq!(scores, expected);
    assert_eq!(scores.iter().sum::<i32>(), 0);
    assert_eq!(score_votes(&"E".repeat(33)).unwrap(), vec![0; 22]);
    assert!(score_votes("LLR").is_err());
    assert!(score_votes(&"X".repeat(33)).is_err());

    let best = best_filters(&votes).unwrap();
    let want: Vec<String> = FilterId::all()
        .filter(|f| expected[f.index()] == 3)
        .map(|f| f.name().to_string())
        .collect();
    assert_eq!(best, want);
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (k - i) as f64).product()
}

#[test]
fn random_guess_matches_closed_form() {
    for (n, k) in [(1u32, 1u32), (4, 1), (4, 3), (2, 5)] {
        let exact = 1.0 - choose(22 - n as u64, k as u64) / choose(22, k as u64);
        let trials = 40_000;
        let est = random_guess_accuracy(n, k, trials, 7).unwrap();
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((est - exact).abs() < 4.0 * sigma, "n={n} k={k}: {est} vs {exact}");
    }
    assert!(random_guess_accuracy(0, 1, 10, 0).is_err());
    assert!(random_guess_accuracy(3, 23, 10, 0).is_err());
}
