use maskroute_core::synth::{gen_clip, ClipDims, TrajectoryKind, TrajectorySpec};
use maskroute_core::tensor::downsample_mask;

fn main() {
    let dims = ClipDims { t: 2, h: 16, w: 16, t_a: 8, d_a: 4 };
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Single,
        radii: vec![3.5],
        colors: vec![[0.2, 0.8, 0.3]],
        speed: 1.0,
        starts: vec![(5.0, 5.0)],
    };
    let record = gen_clip(&spec, dims, 77).unwrap();
    let soft = downsample_mask(&record.gt_masks, 4, 2).unwrap();
    println!("soft shape {:?}", soft.shape());
    let d = soft.as_f32().unwrap();
    for t in 0..2 {
        println!("t={t}");
        for h in 0..2 {
            println!("  {:?}", (0..2).map(|w| d[(t*2+h)*2+w]).collect::<Vec<_>>());
        }
    }
}
