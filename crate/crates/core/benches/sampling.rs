// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dclab_core::collectors::CollectorSpec;
use dclab_core::compliance::{estimate_compliance_with, Experiment, RequesterProfile};
use dclab_core::exec::{Bytes, Payload, Script, SecurityParam, Step, Target};
use dclab_core::par::Backend;

fn experiment() -> Experiment {
    let c = CollectorSpec::histind();
    let ins = |k: &str| Payload::insert(Bytes::utf8(k), Bytes::utf8("v"));
    let act = Step::Activate { target: Target::Requester };
    let env = Script::new()
        .start("histind", ins("bob"), Some("b"))
        .then(act.clone())
        .start("histind", ins("carol"), None)
        .then(act)
        .start("histind", Payload::lookup(Bytes::utf8("bob"), Bytes::reply("b")), None);
    let req = Script::new()
        .start("histind", ins("alice"), Some("y"))
        .then(Step::Yield)
        .start("histind/del", Payload::delete_token("y"), None);
    Experiment::new(SecurityParam::new(8).unwrap(), c.clone(), env, RequesterProfile::from_script(req, &c))
}

fn sampling(cr: &mut Criterion) {
    let exp = experiment();
    let mut g = cr.benchmark_group("estimate_compliance");
    g.sample_size(10);
    let mut backends = vec![("sequential", Backend::Sequential)];
    #[cfg(feature = "parallel")]
    backends.push(("rayon", Backend::Rayon));
    for n in [2_000u64, 10_000] {
        for (name, b) in &backends {
            g.bench_with_input(BenchmarkId::new(*name, n), &n, |bench, &n| {
                bench.iter(|| estimate_compliance_with(&exp, n, 1, *b).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
