//! Hand-counted DICE, AP and log-average miss rate cases, shared by the
//! metric tests and the acceptance run.

use cfr_core::detector::{BBox, Detection};
use cfr_core::metrics::{
    average_precision, binarize_logits, dice_score, log_average_miss_rate, mean_average_precision, ImageTruth,
    MissRateConfig,
};
use cfr_core::tensor::Tensor;

pub struct Fixture {
    pub name: &'static str,
    pub got: Option<f64>,
    pub expected: Option<f64>,
    /// Zero means exact equality.
    pub tol: f64,
}

impl Fixture {
    fn exact(name: &'static str, got: Option<f64>, expected: Option<f64>) -> Self {
        Self { name, got, expected, tol: 0.0 }
    }

    fn near(name: &'static str, got: Option<f64>, expected: f64, tol: f64) -> Self {
        Self { name, got, expected: Some(expected), tol }
    }

    pub fn passed(&self) -> bool {
        match (self.got, self.expected) {
            (Some(g), Some(e)) if self.tol == 0.0 => g == e,
            (Some(g), Some(e)) => (g - e).abs() <= self.tol,
            (g, e) => g == e,
        }
    }
}

pub fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f32> {
    let mut v = vec![0.0f32; h * w];
    for &(y, x) in on {
        v[y * w + x] = 1.0;
    }
    Tensor::from_vec(&[1, 1, h, w], v).unwrap()
}

pub fn det(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Detection {
    det_c(BBox::new(x1, y1, x2, y2), 0, confidence)
}

pub fn det_c(bbox: BBox, class_id: usize, confidence: f64) -> Detection {
    Detection { bbox, class_id, confidence }
}

pub fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> (BBox, usize) {
    (BBox::new(x1, y1, x2, y2), 0)
}

pub fn no_filter() -> MissRateConfig {
    MissRateConfig {
        min_height: 0.0,
        ..MissRateConfig::for_image_height(96)
    }
}

fn dice(a: &Tensor<f32>, b: &Tensor<f32>) -> Option<f64> {
    Some(dice_score(a, b).unwrap())
}

pub fn dice_fixtures() -> Vec<Fixture> {
    let diag = mask(3, 3, &[(0, 0), (1, 1), (2, 2)]);
    // a 2x2 block and the same block shifted one column right
    let block = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let shifted = mask(4, 4, &[(0, 1), (1, 1), (0, 2), (1, 2)]);
    // sigmoid(0) = 0.5 is not above 0.5: |A| = 2, |B| = 1, overlap 1
    let logits = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 0.0, 0.1, 3.0]).unwrap();
    vec![
        Fixture::exact("identical", dice(&diag, &diag), Some(1.0)),
        Fixture::exact(
            "disjoint",
            dice(&mask(2, 4, &[(0, 0), (0, 1)]), &mask(2, 4, &[(1, 2), (1, 3)])),
            Some(0.0),
        ),
        Fixture::exact("4 and 4, overlap 2", dice(&block, &shifted), Some(0.5)),
        Fixture::exact("both empty", dice(&mask(5, 5, &[]), &mask(5, 5, &[])), Some(1.0)),
        Fixture::exact(
            "3 and 2, overlap 1",
            dice(&mask(3, 3, &[(0, 0), (0, 1), (0, 2)]), &mask(3, 3, &[(0, 2), (2, 2)])),
            Some(0.4),
        ),
        Fixture::exact("one side empty", dice(&mask(3, 3, &[(1, 1)]), &mask(3, 3, &[])), Some(0.0)),
        Fixture::exact(
            "binarized logits",
            dice(&binarize_logits(&logits), &mask(1, 4, &[(0, 3)])),
            Some(2.0 / 3.0),
        ),
    ]
}

pub fn ap_fixtures() -> Vec<Fixture> {
    let one = vec![vec![gt(0.0, 0.0, 10.0, 20.0)]];
    let hit = det(0.0, 0.0, 10.0, 20.0, 0.9);
    let far = |c| det(50.0, 50.0, 60.0, 70.0, c);
    let ap = |dets: &[Vec<Detection>], gts: &[ImageTruth]| average_precision(dets, gts, 0, 0.5);

    let perfect_gts = vec![vec![gt(0.0, 0.0, 10.0, 20.0)], vec![gt(5.0, 5.0, 15.0, 25.0), gt(40.0, 0.0, 50.0, 20.0)]];
    let perfect = vec![
        vec![det(0.0, 0.0, 10.0, 20.0, 1.0)],
        vec![det(5.0, 5.0, 15.0, 25.0, 1.0), det(40.0, 0.0, 50.0, 20.0, 1.0)],
    ];
    // ranked tp, fp, tp: P = [1, 1/2, 2/3], R = [1/2, 1/2, 1]; AP = 1/2 + 1/2 * 2/3
    let two_gts = vec![vec![gt(0.0, 0.0, 10.0, 20.0)], vec![gt(20.0, 0.0, 30.0, 20.0)]];
    let tp_fp_tp = vec![vec![hit], vec![det(60.0, 60.0, 70.0, 80.0, 0.8), det(20.0, 0.0, 30.0, 20.0, 0.7)]];
    // second box on the same object cannot claim it again; other gt missed
    let pair = vec![vec![gt(0.0, 0.0, 10.0, 20.0), gt(30.0, 0.0, 40.0, 20.0)]];
    let duplicate = vec![vec![hit, det(0.5, 0.0, 10.0, 20.0, 0.8)]];
    // intersection 50, union 100
    let square = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
    // class 0 perfect; class 1 fp then tp; class 2 has no gt
    let (a, b, f) = (BBox::new(0.0, 0.0, 10.0, 20.0), BBox::new(30.0, 0.0, 40.0, 20.0), BBox::new(70.0, 70.0, 80.0, 90.0));
    let multi_gts = vec![vec![(a, 0), (b, 1)]];
    let multi = vec![vec![det_c(a, 0, 0.9), det_c(f, 1, 0.8), det_c(b, 1, 0.7), det_c(f, 2, 0.6)]];
    vec![
        Fixture::exact("perfect", ap(&perfect, &perfect_gts), Some(1.0)),
        Fixture::exact("no detections", ap(&[vec![]], &one), Some(0.0)),
        Fixture::exact("tp then fp", ap(&[vec![hit, far(0.8)]], &one), Some(1.0)),
        Fixture::exact("fp then tp", ap(&[vec![far(0.95), hit]], &one), Some(0.5)),
        Fixture::near("tp fp tp", ap(&tp_fp_tp, &two_gts), 5.0 / 6.0, 1e-15),
        Fixture::exact("duplicate", ap(&duplicate, &pair), Some(0.5)),
        Fixture::exact("iou at threshold", ap(&[vec![det(0.0, 0.0, 10.0, 5.0, 0.7)]], &square), Some(1.0)),
        Fixture::exact("iou below threshold", ap(&[vec![det(0.0, 0.0, 10.0, 4.9, 0.7)]], &square), Some(0.0)),
        Fixture::exact("mAP skips empty class", mean_average_precision(&multi, &multi_gts, 3, 0.5).1, Some(0.75)),
    ]
}

/// 4 gt in images 0..3 of 10; ranked fp, tp, tp, fp, tp. The curve is
/// (0,1) (.1,1) (.1,.75) (.1,.5) (.2,.5) (.2,.25): grid points below .1 give
/// 1 (4 points), .1 and .178 give .5, .316, .562 and 1 give .25.
pub fn walked_curve() -> (Vec<Vec<Detection>>, Vec<ImageTruth>) {
    let mut gts: Vec<ImageTruth> = vec![Vec::new(); 10];
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); 10];
    for (i, g) in gts.iter_mut().take(4).enumerate() {
        g.push(gt(10.0 * i as f64, 0.0, 10.0 * i as f64 + 8.0, 20.0));
    }
    dets[5].push(det(50.0, 50.0, 60.0, 70.0, 0.95));
    dets[0].push(det(0.0, 0.0, 8.0, 20.0, 0.9));
    dets[1].push(det(10.0, 0.0, 18.0, 20.0, 0.8));
    dets[6].push(det(50.0, 50.0, 60.0, 70.0, 0.7));
    dets[2].push(det(20.0, 0.0, 28.0, 20.0, 0.6));
    (dets, gts)
}

pub fn lamr_fixtures() -> Vec<Fixture> {
    let nf = no_filter();
    let one = vec![vec![gt(0.0, 0.0, 10.0, 20.0)]];
    let (walked_dets, walked_gts) = walked_curve();
    // two tall gt and one short gt in image 0, image 1 empty; ranked: hit on
    // short, hit on tall, fp in image 1
    let mixed_gts = vec![
        vec![gt(0.0, 0.0, 10.0, 30.0), gt(20.0, 0.0, 30.0, 30.0), gt(50.0, 0.0, 55.0, 8.0)],
        vec![],
    ];
    let mixed = vec![
        vec![det(50.0, 0.0, 55.0, 8.0, 0.9), det(0.0, 0.0, 10.0, 30.0, 0.8)],
        vec![det(70.0, 70.0, 80.0, 90.0, 0.7)],
    ];
    let tall_only = MissRateConfig { min_height: 10.0, ..no_filter() };
    vec![
        Fixture::exact("perfect", log_average_miss_rate(&[vec![det(0.0, 0.0, 10.0, 20.0, 0.9)]], &one, &nf), Some(0.0)),
        Fixture::exact("silent", log_average_miss_rate(&[vec![], vec![]], &[one[0].clone(), one[0].clone()], &nf), Some(1.0)),
        Fixture::near(
            "half found, no fp",
            log_average_miss_rate(
                &[vec![det(0.0, 0.0, 10.0, 20.0, 0.9)]],
                &[vec![gt(0.0, 0.0, 10.0, 20.0), gt(30.0, 0.0, 40.0, 20.0)]],
                &nf,
            ),
            0.5,
            1e-15,
        ),
        Fixture::near("walked curve", log_average_miss_rate(&walked_dets, &walked_gts, &nf), 0.5f64.powf(8.0 / 9.0), 1e-12),
        // the short hit neither counts nor costs: 1 of 2 found
        Fixture::near("height filter", log_average_miss_rate(&mixed, &mixed_gts, &tall_only), 0.5, 1e-15),
        // 2 of 3 found before the first false positive
        Fixture::near("unfiltered", log_average_miss_rate(&mixed, &mixed_gts, &nf), 1.0 / 3.0, 1e-15),
        Fixture::exact(
            "no surviving gt",
            log_average_miss_rate(&[vec![]], &[vec![gt(0.0, 0.0, 10.0, 5.0)]], &tall_only),
            None,
        ),
    ]
}
