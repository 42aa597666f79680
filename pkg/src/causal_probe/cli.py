"""causal-probe command line interface.

Exit codes: 0 success, 2 validation error, 3 policy transport error,
4 numeric degeneracy.
"""

from __future__ import annotations

import sys

import click

from . import harness
from .conformance import run_conformance
from .errors import (
    DegenerateMapError,
    FormatError,
    NumericError,
    ParameterError,
    ProbeError,
    TransportError,
)

EXIT_VALIDATION = 2
EXIT_TRANSPORT = 3
EXIT_NUMERIC = 4


def _exit_code(exc: ProbeError) -> int:
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    if isinstance(exc, (DegenerateMapError, NumericError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ParameterError, FormatError)):
        return EXIT_VALIDATION
    return EXIT_VALIDATION


def _run(fn):
    try:
        return fn()
    except ProbeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(_exit_code(e))


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


manifest_option = click.option("--manifest", "-m", required=True,
                               type=click.Path(exists=True), help="run manifest JSON")
seed_option = click.option("--seed", type=int, default=None,
                           help="override the manifest master seed")
out_option = click.option("--out", type=click.Path(), default=None,
                          help="override the manifest output directory")
policy_option = click.option("--policy", default=None,
                             help="override the policy endpoint (synth:|stdio:|tcp:)")


@click.group()
@click.version_option()
def main():
    """Interventional saliency and causal-misalignment diagnostics."""


@main.command("iss")
@manifest_option
@seed_option
@out_option
@policy_option
def cmd_iss(manifest, seed, out, policy):
    """Compute saliency streams for every episode in the manifest."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        report = harness.run_iss(m)
        click.echo(f"wrote {len(report['episodes'])} episode streams to {m.output_dir}")
    _run(go)


@main.command("sweep")
@manifest_option
@seed_option
@out_option
@policy_option
@click.option("--n-list", default="50,100,150,200", help="comma-separated mask counts")
@click.option("--p-list", default="0.1,0.2,0.3,0.4,0.5", help="comma-separated keep probabilities")
def cmd_sweep(manifest, seed, out, policy, n_list, p_list):
    """Interventional action MSE over an (N, p) grid."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        path = harness.run_sweep(m, _ints(n_list), _floats(p_list))
        click.echo(f"wrote {path}")
    _run(go)


@main.command("robustness")
@manifest_option
@seed_option
@out_option
@policy_option
@click.option("--select-quantile", type=float, default=1.0,
              help="keep this fraction of episodes with the lowest action MSE")
def cmd_robustness(manifest, seed, out, policy, select_quantile):
    """Noise-in-nuisance stability study (soft intervention)."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        report = harness.run_robustness(m, select_quantile=select_quantile)
        pt = report["mean_selected"]
        click.echo(f"operating point: delta_a={pt['delta_a']:.6g} delta_s={pt['delta_s']:.6g}")
    _run(go)


@main.command("fidelity")
@manifest_option
@seed_option
@out_option
@policy_option
@click.option("--lam", type=float, default=1.0, help="perturbation strength in [0, 1]")
def cmd_fidelity(manifest, seed, out, policy, lam):
    """Structured-perturbation faithfulness study (hard interventions)."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        report = harness.run_fidelity(m, lam=lam)
        for kind, per in report["correlations"].items():
            parts = ", ".join(f"{meth}: r={val}" if isinstance(val, str)
                              else f"{meth}: r={val:.3f}" for meth, val in per.items())
            click.echo(f"{kind}: {parts}")
    _run(go)


@main.command("correlate")
@manifest_option
@seed_option
@out_option
@policy_option
@click.option("--success", required=True, type=click.Path(exists=True),
              help="CSV with task, seed, success_rate columns")
def cmd_correlate(manifest, seed, out, policy, success):
    """Correlate nuisance mass ratio with external success rates."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        report = harness.run_correlate(m, success)
        for k, stats in report["per_k"].items():
            click.echo(f"k={k}: r={stats['r']:.3f}")
        click.echo(f"strongest (most negative) correlation at k={report['best_k']}")
    _run(go)


@main.command("bench")
@manifest_option
@seed_option
@out_option
@policy_option
@click.option("--n-list", default="50,100,150,200")
@click.option("--p-list", default="0.1,0.2,0.3,0.4,0.5")
@click.option("--repeats", type=int, default=3)
def cmd_bench(manifest, seed, out, policy, n_list, p_list, repeats):
    """Latency / throughput benchmark of the masking procedure."""
    def go():
        m = harness.load_manifest(manifest, seed=seed, out=out, policy=policy)
        path = harness.run_bench(m, _ints(n_list), _floats(p_list), repeats=repeats)
        click.echo(f"wrote {path}")
    _run(go)


@main.command("synth")
@click.option("--scene", type=click.Path(exists=True), default=None,
              help="scene spec JSON (defaults when omitted)")
@click.option("--out", required=True, type=click.Path())
@click.option("--episodes", type=int, default=3)
@click.option("--eta", type=float, default=0.0,
              help="nuisance reliance of the bundled synthetic policy")
def cmd_synth(scene, out, episodes, eta):
    """Render a synthetic episode store with exact partitions."""
    def go():
        manifest = harness.run_synth(scene, out, n_episodes=episodes, eta=eta)
        click.echo(f"wrote {len(manifest['episodes'])} episodes and manifest.json to {out}")
    _run(go)


@main.command("serve-conformance")
@click.option("--policy", required=True,
              help="endpoint to test, e.g. stdio:\"policy-server --mode echo\"")
@click.option("--requests", type=int, default=1000, help="pipelined act request count")
def cmd_serve_conformance(policy, requests):
    """Run the wire-protocol conformance suite against a server."""
    def go():
        report = run_conformance(policy, n_requests=requests)
        for line in report.lines():
            click.echo(line)
        if not report.all_ok:
            sys.exit(EXIT_TRANSPORT)
    _run(go)


if __name__ == "__main__":
    main()
