use medex_core::docmodel::{parse_ocr_document, BBox, Document, PageSize, Word};
use medex_core::evalkit::{cohen_kappa, metric_row, reconcile_table_row_with, ConfusionCounts, MetricRow, RoundingRule, YesNo};
use medex_core::labelmodel::{graphical_posterior, GraphicalParams};
use medex_core::lfkit::Vote;
use medex_core::promptex::{build_prompt, format_answers, parse_answers, PromptTemplate};
use medex_core::ClassLabel;
use proptest::prelude::*;

/// Words on a jittered grid: distinct cells, never more than a quarter line
/// of vertical drift.
fn words_strategy() -> impl Strategy<Value = Vec<Word>> {
    prop::collection::btree_set((0usize..2, 0usize..30, 0usize..8), 1..60).prop_flat_map(|cells| {
        let cells: Vec<_> = cells.into_iter().collect();
        let n = cells.len();
        (
            Just(cells),
            prop::collection::vec((-0.2f64..0.2, "[A-Za-z0-9:.]{1,8}"), n),
        )
            .prop_map(|(cells, jitter)| {
                cells
                    .into_iter()
                    .zip(jitter)
                    .map(|((page, row, col), (dy, text))| {
                        let h = 1.0 / 32.0;
                        let y0 = (row as f64 + 0.5 + dy * 0.5) * h;
                        let x0 = col as f64 / 8.0 + 0.01;
                        Word {
                            page,
                            text,
                            bbox: BBox::new(x0, y0, x0 + 0.1, y0 + 0.6 * h).unwrap(),
                        }
                    })
                    .collect()
            })
    })
}

fn page_sizes() -> Vec<Option<PageSize>> {
    vec![
        Some(PageSize {
            width_px: 1240.0,
            height_px: 1754.0,
        }),
        None,
    ]
}

proptest! {
    #[test]
    fn ocr_json_round_trip(words in words_strategy()) {
        let doc = Document::from_words("d", page_sizes(), words).unwrap();
        let back = parse_ocr_document(&doc.to_ocr_json()).unwrap();
        prop_assert_eq!(back, doc);
    }

    #[test]
    fn reading_order_ignores_input_order(words in words_strategy(), seed in any::<u64>()) {
        let a = Document::from_words("d", page_sizes(), words.clone()).unwrap();
        let mut shuffled = words;
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = Document::from_words("d", page_sizes(), shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn graphical_posterior_is_a_distribution(
        theta in prop::collection::vec(-30.0f64..30.0, 12),
        prior in prop::collection::vec(-5.0f64..5.0, 4),
        votes in prop::collection::vec(prop::option::of(0usize..4), 3),
    ) {
        let rows: Vec<Vec<f64>> = theta.chunks(4).map(<[f64]>::to_vec).collect();
        let g = GraphicalParams::from_parts(rows, prior).unwrap();
        let votes: Vec<Vote> = votes
            .into_iter()
            .map(|v| v.map_or(Vote::Abstain, |c| Vote::Class(ClassLabel::from_index(c).unwrap())))
            .collect();
        let post = graphical_posterior(&g, &votes).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(post.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn answers_parse_what_format_writes(bits in prop::collection::vec(any::<bool>(), 1..30)) {
        let answers: Vec<YesNo> = bits.into_iter().map(YesNo::from_bool).collect();
        let parsed = parse_answers(&format_answers(&answers), answers.len()).unwrap();
        prop_assert_eq!(parsed, answers);
    }

    #[test]
    fn prompts_differ_when_course_text_differs(a in "[a-z ]{1,40}[a-z]", b in "[a-z ]{1,40}[a-z]") {
        prop_assume!(a != b);
        let t = PromptTemplate::default();
        prop_assert_ne!(build_prompt(&t, &a).unwrap(), build_prompt(&t, &b).unwrap());
    }

    #[test]
    fn reconcile_recovers_rounded_counts(tp in 1u32..15, fp in 0u32..8, fn_ in 0u32..8, tn in 1u32..15) {
        let c = ConfusionCounts::new(tp, fp, fn_, tn);
        let exact = metric_row(&c);
        prop_assume!(!exact.flags.any());
        let v = exact.metrics.values().map(|x| (x * 100.0).round() / 100.0);
        let target = MetricRow::new(v[0], v[1], v[2], v[3], v[4], v[5]);
        for rule in [RoundingRule::Nearest, RoundingRule::NearestOrTruncated] {
            let found = reconcile_table_row_with(&target, c.n(), rule);
            prop_assert!(found.contains(&c), "{:?} not among {:?}", c, found);
        }
    }

    #[test]
    fn kappa_is_symmetric(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..60)) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let ab = cohen_kappa(&a, &b).unwrap();
        let ba = cohen_kappa(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
    }
}
