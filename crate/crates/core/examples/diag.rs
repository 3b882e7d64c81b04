// Scratch diagnostic: inspect attention maps of a trained phase-1 model.
use boneage_core::attention::*;
use boneage_core::nn::load_checkpoint;
use boneage_core::pipeline::ExperimentConfig;
use boneage_core::synth::{load_dataset, split};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let exp = std::path::Path::new(&args[1]);
    let mode = args.get(2).map(String::as_str).unwrap_or("region1");
    let kind = match mode {
        "hand" => RegionKind::Hand,
        _ => RegionKind::Region1,
    };
    let cfg = ExperimentConfig::default();
    let input_size = if mode == "hand" {
        cfg.localization.hand_input
    } else {
        cfg.localization.full_input
    };
    let ckpt = load_checkpoint(&exp.join(format!("checkpoints/phase1-{mode}.ckpt"))).unwrap();
    let (records, _) = load_dataset(&exp.join("dataset")).unwrap();
    let splits = split(records.len(), cfg.split.seed, 500, 500).unwrap();

    let mut peak_inside = 0usize;
    let mut n = 0usize;
    let mut pred_area_sum = 0.0;
    let mut truth_area_sum = 0.0;
    let mut iou_sum = 0.0;
    let tau: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50.0);
    for &i in splits.test.iter().take(300) {
        let r = &records[i];
        let truth = *r.truth_box(kind).unwrap();
        let map = attention_map(&ckpt.net, &r.image, input_size).unwrap();
        let map = resize_map(&map, r.image.height(), r.image.width());
        let norm = map.normalized();
        // peak location
        let mut best = (0usize, 0usize);
        let mut bv = f32::NEG_INFINITY;
        for y in 0..norm.height {
            for x in 0..norm.width {
                if norm.get(y, x) > bv {
                    bv = norm.get(y, x);
                    best = (x, y);
                }
            }
        }
        if truth.contains(best.0, best.1) {
            peak_inside += 1;
        }
        let mask = threshold_mask(&norm, tau);
        if let Ok(pred) = mask_to_box(&mask, kind) {
            pred_area_sum += pred.area() as f64;
            truth_area_sum += truth.area() as f64;
            iou_sum += boneage_core::metrics::iou(&pred, &truth);
        }
        n += 1;
        if n <= 8 {
            let pred = mask_to_box(&mask, kind).ok();
            println!(
                "id {} age {:3} truth ({},{})-({},{}) peak ({},{}) in_truth={} pred {:?}",
                r.id, r.age, truth.x0, truth.y0, truth.x1, truth.y1, best.0, best.1,
                truth.contains(best.0, best.1),
                pred.map(|p| (p.x0, p.y0, p.x1, p.y1))
            );
        }
        if n <= 3 {
            // dump image and normalized map side by side
            use boneage_core::raster::GrayImage;
            let (h, w) = (r.image.height(), r.image.width());
            let mut vis = GrayImage::new(w * 2 + 2, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    vis.set(x, y, r.image.get(x, y));
                    vis.set(w + 2 + x, y, norm.get(y, x) / 100.0);
                }
            }
            vis.write_pgm(std::path::Path::new(&format!("/tmp/diag_{mode}_{}.pgm", r.id)))
                .unwrap();
            // print map row through the truth box center
            let cy = (truth.y0 + truth.y1) / 2;
            let row: Vec<String> = (0..w)
                .step_by(2)
                .map(|x| format!("{:3.0}", norm.get(cy, x)))
                .collect();
            println!("   row y={cy}: {}", row.join(" "));
        }
    }
    println!(
        "kind {kind} tau {tau}: peak-inside-truth {}/{n}  mean pred area {:.1} vs truth {:.1}  mean IoU {:.3}",
        peak_inside,
        pred_area_sum / n as f64,
        truth_area_sum / n as f64,
        iou_sum / n as f64
    );
}
