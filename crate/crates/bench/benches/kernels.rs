use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use echofusion::camera::{compute_vertex_normal_maps, render_depth};
use echofusion::{icp_align, IcpConfig, RigidPose, Vec3};
use echofusion_bench::{camera, grid, segmentation};

fn kernels(c: &mut Criterion) {
    let seg = segmentation(&RigidPose::identity());
    let cam = camera(480).with_far_for(seg.geometry());
    let depth = render_depth(&seg, &cam);
    let mut tsdf = grid(256);
    tsdf.integrate(&depth, &cam);
    let model_cam = cam.with_far_for(&tsdf.geometry());

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    g.bench_function("render_depth 128^3 to 480^2", |b| b.iter(|| render_depth(black_box(&seg), &cam)));
    g.bench_function("integrate 256^3 from 480^2", |b| {
        b.iter_batched_ref(|| tsdf.clone(), |t| t.integrate(black_box(&depth), &cam), criterion::BatchSize::LargeInput)
    });
    g.bench_function("raycast 256^3 to 480^2", |b| b.iter(|| tsdf.raycast_observed(black_box(&model_cam))));

    let moved = RigidPose::rotation_about(Vec3::new(0.0, 95.0, 0.0), Vec3::z(), 2f64.to_radians());
    let src_seg = segmentation(&moved);
    let src = compute_vertex_normal_maps(&render_depth(&src_seg, &cam), &cam);
    let dst = tsdf.raycast_observed(&model_cam);
    g.bench_function("icp_align 480^2 pyramid", |b| {
        b.iter(|| icp_align(black_box(&src), &dst, &model_cam, &model_cam.pose, &IcpConfig::default()).expect("aligns"))
    });
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
