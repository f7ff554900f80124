use ndarray::Array2;
use sortseg::dataio::{ClassLabel, Partition};
use sortseg::raster::Mask;
use sortseg::scenegen::{render_sequence, SceneConfig};
use sortseg::segtrain::{train_segmenter_on, SegConfig, SegSample, Segmenter};

fn iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

fn scene_frame() -> (image::RgbImage, Mask) {
    let cfg = SceneConfig { image_size: 64, object_radius_range: [5.0, 9.0], ..Default::default() };
    render_sequence(&cfg, Partition::Train, ClassLabel::Before, 0)
        .into_iter()
        .map(|f| (f.image, f.gt_unwanted_mask))
        .find(|(_, m)| m.iter().filter(|&&v| v).count() > 100)
        .expect("a frame with unwanted items")
}

#[test]
fn memorizes_a_single_frame() {
    let (img, mask) = scene_frame();
    let sample = SegSample::new(&img, &mask, 64).unwrap();
    let train = vec![sample; 50];
    let ck = train_segmenter_on(&train, &[], &SegConfig::default()).unwrap();
    let pred = Segmenter::from_checkpoint(&ck).unwrap().segment(&img);
    let score = iou(&pred, &mask);
    assert!(score >= 0.95, "memorization IoU {score:.4}");
}

#[test]
fn empty_pseudo_masks_give_empty_predictions() {
    let (img, _) = scene_frame();
    let empty: Mask = Array2::from_elem((64, 64), false);
    let train = vec![SegSample::new(&img, &empty, 64).unwrap(); 8];
    let cfg = SegConfig { max_epochs: 5, ..Default::default() };
    let ck = train_segmenter_on(&train, &[], &cfg).unwrap();
    let pred = Segmenter::from_checkpoint(&ck).unwrap().segment(&img);
    let rate = pred.iter().filter(|&&v| v).count() as f64 / pred.len() as f64;
    assert!(rate < 1e-3, "unwanted rate {rate}");
}

#[test]
fn training_is_deterministic() {
    let (img, mask) = scene_frame();
    let train = vec![SegSample::new(&img, &mask, 64).unwrap(); 4];
    let cfg = SegConfig { max_epochs: 2, seed: 5, ..Default::default() };
    let a = train_segmenter_on(&train, &[], &cfg).unwrap();
    let b = train_segmenter_on(&train, &[], &cfg).unwrap();
    assert_eq!(a.params, b.params);
}
