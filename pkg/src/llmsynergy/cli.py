"""Command-line entry point: ``llmsynergy <command> [options]``.

Exit codes: 0 ok, 2 config error, 3 transport error, 4 data error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .config import Config, ConfigError, RunConfig
from .cost_model import FRAMEWORK_ORDER, Framework, SpecError, cost_report
from .latency_sim import compare_frameworks, render_comparison, simulate, summarize
from .model_backend import TransportError, make_backend
from .protocol import FrameDecoder, PromptEnvelope, ProtocolError, encode

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("llmsynergy")


class DataError(Exception):
    pass


def _frameworks(name: str) -> list[Framework]:
    if name == "all":
        return list(FRAMEWORK_ORDER)
    try:
        return [Framework.parse(name)]
    except ValueError as exc:
        raise ConfigError("--framework", str(exc)) from None


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


# ---- commands ------------------------------------------------------------------


def cmd_cost(args, run: RunConfig) -> int:
    cfg = run.config
    kinds = _frameworks(args.framework)
    n = args.n if args.n is not None else cfg.get_int("workload", "n_requests")
    end_edge, edge_cloud = cfg.cost_links()
    try:
        report = cost_report(cfg.deployments(kinds), (end_edge, edge_cloud), n)
    except SpecError as exc:
        raise ConfigError("deployment", str(exc)) from exc
    text = report.to_text()
    _write(run.out_dir, "cost_report.txt", text)
    _write(run.out_dir, "cost_report.json", report.to_json())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args, run: RunConfig) -> int:
    cfg = run.config
    p = cfg.sim_params(n_requests=args.n, rng_seed=args.seed, duplicate_fraction=args.duplicates)
    summaries = []
    for fw in _frameworks(args.framework):
        t0 = time.perf_counter()
        trace = simulate(fw, p)
        wall = time.perf_counter() - t0
        s = summarize(trace)
        _write(run.out_dir, f"sim_{fw.value}.log", trace.to_log())
        _write(run.out_dir, f"sim_{fw.value}_summary.json", s.to_json())
        log.info("%s simulated in %.3f s wall clock", fw.value, wall)
        summaries.append(s)
    table = render_comparison(summaries)
    _write(run.out_dir, "sim_comparison.txt", table)
    sys.stdout.write(table)
    return EXIT_OK


def edge_service_from_config(cfg: Config, listen: str | None = None, backend: str | None = None, cloud: str | None = None):
    from .edge_node import EdgeService, EdgeSettings, ProfileStore

    sec = "edge"
    profiles_dir = cfg.get(sec, "profiles_dir", "")
    profiles = ProfileStore.load_dir(profiles_dir) if profiles_dir else ProfileStore.builtin()
    settings = EdgeSettings(
        listen=listen or cfg.get(sec, "listen"),
        cloud_address=cloud or cfg.get(sec, "cloud_address"),
        metrics_listen=cfg.get(sec, "metrics_listen", "") or None,
        dedup_ttl_s=cfg.get_float(sec, "dedup_ttl_s"),
        dedup_capacity=cfg.get_int(sec, "dedup_capacity"),
        termination_threshold=cfg.get_float(sec, "termination_threshold"),
        batch_window_s=cfg.get_float(sec, "batch_window_s"),
        max_batch=cfg.get_int(sec, "max_batch"),
    )
    return EdgeService(make_backend(backend or cfg.get(sec, "backend"), cfg), profiles, settings)


def cloud_service_from_config(cfg: Config, listen: str | None = None, backend: str | None = None):
    from .cloud_node import AdapterRegistry, CloudService

    models = {s.split(".", 1)[1]: cfg.model(s.split(".", 1)[1]) for s in cfg.sections("model.")}
    registry = AdapterRegistry(models)
    path = cfg.get("cloud", "adapter_registry", "")
    if path:
        registry.load(path)
    return CloudService(make_backend(backend or cfg.get("cloud", "backend"), cfg), listen or cfg.get("cloud", "listen"), registry)


async def _serve(service, role: str) -> None:
    host, port = await service.start()
    print(f"{role} listening on {host}:{port}", flush=True)
    if role == "edge" and service.metrics_address:
        mh, mp = service.metrics_address
        print(f"edge metrics on http://{mh}:{mp}/metrics", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await service.stop()


def cmd_serve(args, run: RunConfig) -> int:
    if args.role == "edge":
        service = edge_service_from_config(run.config, args.listen, args.backend, args.cloud)
    else:
        service = cloud_service_from_config(run.config, args.listen, args.backend)
    try:
        asyncio.run(_serve(service, args.role))
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        raise TransportError(f"cannot listen: {exc}") from exc
    return EXIT_OK


def read_prompt_file(path: str | Path) -> list[tuple[str, str]]:
    """Lines of ``prompt`` or ``bs_id<TAB>prompt``; blank lines and ``#`` comments skipped."""
    out = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read prompts: {exc}") from exc
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        bs_id, sep, prompt = line.partition("\t")
        out.append((bs_id.strip(), prompt.strip()) if sep else ("", line.strip()))
    if not out:
        raise DataError(f"{path}: no prompts")
    return out


async def send_prompts(address: str, envelopes: Sequence[PromptEnvelope], timeout_s: float = 30.0) -> list[PromptEnvelope]:
    """Send concise envelopes over one connection and collect one response per request."""
    from .edge_node import parse_address

    host, port = parse_address(address)
    reader, writer = await asyncio.open_connection(host, port)
    wanted = {e.request_id for e in envelopes}
    got: dict[str, PromptEnvelope] = {}
    decoder = FrameDecoder()
    try:
        writer.write(b"".join(encode(e) for e in envelopes))
        await writer.drain()

        async def collect():
            while wanted - got.keys():
                data = await reader.read(65536)
                if not data:
                    raise ConnectionError(f"edge closed the connection with {len(wanted - got.keys())} responses pending")
                for msg in decoder.feed(data):
                    for env in msg if isinstance(msg, list) else [msg]:
                        got[env.request_id] = env

        await asyncio.wait_for(collect(), timeout_s)
    finally:
        writer.close()
    return [got[e.request_id] for e in envelopes]


def scrape_metrics(address: str, timeout_s: float = 5.0) -> dict[str, float]:
    import httpx

    try:
        resp = httpx.get(f"http://{address}/metrics", timeout=timeout_s)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        raise TransportError(f"metrics scrape failed: {exc}") from exc
    out = {}
    for line in resp.text.splitlines():
        name, _, value = line.partition(" ")
        if value:
            out[name] = float(value)
    return out


def cmd_client(args, run: RunConfig) -> int:
    cfg = run.config
    prompts = read_prompt_file(args.send)
    envs = [PromptEnvelope.concise(f"req-{i:05d}", text, bs_id) for i, (bs_id, text) in enumerate(prompts)]
    address = args.edge or cfg.get("edge", "listen")
    try:
        responses = asyncio.run(send_prompts(address, envs, args.timeout))
    except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
        raise TransportError(f"edge at {address}: {exc or type(exc).__name__}") from exc
    lines = [json.dumps(r.to_obj(), ensure_ascii=False) for r in responses]
    _write(run.out_dir, "client_responses.jsonl", "\n".join(lines) + "\n")
    local = sum(r.terminated_at_edge for r in responses)
    errors = sum(bool(r.error) for r in responses)
    print(f"{len(responses)} responses ({local} answered at the edge, {errors} errors)")
    metrics_addr = args.metrics if args.metrics is not None else cfg.get("edge", "metrics_listen", "")
    if metrics_addr:
        metrics = scrape_metrics(metrics_addr)
        _write(run.out_dir, "edge_metrics.txt", "".join(f"{k} {v:g}\n" for k, v in metrics.items()))
        print(f"edge dedup hits: {metrics.get('edge_dedup_hits', 0):g}")
    return EXIT_OK


def cmd_popularity(args, run: RunConfig) -> int:
    from .netmgmt import popularity as pop

    cfg = run.config
    sec = "popularity"
    hours = args.interval_hours if args.interval_hours is not None else cfg.get_float(sec, "interval_hours")
    top = args.top if args.top is not None else cfg.get_int(sec, "top_k")
    ratio = args.split if args.split is not None else cfg.get_float(sec, "split")
    method = args.method or cfg.get(sec, "method")
    window_days = cfg.get_float(sec, "window_days")
    csv_path = args.csv or str(pop.synthetic_csv_path())
    try:
        records = pop.read_viewing_csv(csv_path, args.timestamp_col, args.title_col)
        if not records:
            raise pop.DataError(f"{csv_path}: no viewing records")
        window = pop.default_window(records, int(window_days * 86400))
        ds = pop.bucketize(records, int(hours * 3600), top, window)
        train, test = pop.split_train_test(ds, ratio)
        pred = pop.predict_baseline(train, test, method)
        sc = pop.score(pred, test.labels, ds.titles)
    except (OSError, pop.DataError) as exc:
        raise DataError(str(exc)) from exc
    report = {
        "csv": str(csv_path),
        "method": method,
        "interval_hours": hours,
        "top_k": top,
        "split": ratio,
        "n_intervals": ds.n_intervals,
        "n_train": train.n_intervals,
        "n_test": test.n_intervals,
        **sc.to_dict(),
    }
    lines = [f"{k}: {v}" for k, v in report.items() if k != "per_title"]
    lines += [f"  {t}: {a:.4f}" for t, a in sc.per_title.items()]
    text = "\n".join(lines) + "\n"
    _write(run.out_dir, "popularity_report.txt", text)
    _write(run.out_dir, "popularity_report.json", json.dumps(report, indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_intent(args, run: RunConfig) -> int:
    from .netmgmt import intent as it

    cfg = run.config
    extractor_name = args.extractor or cfg.get("intent", "extractor")
    if extractor_name == "rules":
        extract = it.extract_intent_rules
    elif extractor_name == "backend":
        extract = it.BackendIntentExtractor(make_backend(args.backend or "mock", cfg))
    else:
        raise ConfigError("--extractor", f"expected rules or backend, got {extractor_name!r}")
    path = args.dataset or str(it.golden_path())
    try:
        samples = it.read_intents(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"{path}: no samples")
    preds = [extract(s.utterance) for s in samples]
    sc = it.score_intents(preds, [s.keywords for s in samples])
    report = {"dataset": path, "extractor": extractor_name, **sc.to_dict()}
    text = "".join(f"{k}: {v}\n" for k, v in report.items())
    _write(run.out_dir, "intent_report.txt", text)
    _write(run.out_dir, "intent_report.json", json.dumps(report, indent=2) + "\n")
    rows = []
    for s, p in zip(samples, preds):
        rows.append(json.dumps({"utterance": s.utterance, "predicted": sorted(map(list, p)), "gold": sorted(map(list, s.keywords))}))
    _write(run.out_dir, "intent_predictions.jsonl", "\n".join(rows) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_corpus(args, run: RunConfig) -> int:
    from .corpus import generate_corpus, write_corpus

    samples = generate_corpus(args.n or 4000, args.seed)
    write_corpus(samples, run.out_dir / "edge_corpus.jsonl")
    avg_c = sum(len(s.concise.encode()) for s in samples) / len(samples)
    avg_i = sum(len(s.intended.encode()) for s in samples) / len(samples)
    print(f"{len(samples)} samples, avg concise {avg_c:.2f} B, avg intended {avg_i:.2f} B")
    return EXIT_OK


# ---- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: shipped defaults.paper.conf)")
    common.add_argument("--out", help="output directory (default: [output] dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="llmsynergy", description="Cloud-edge LLM serving: cost model, simulator, services and netmgmt harnesses.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", parents=[common], help="deployment cost report")
    p.add_argument("--framework", default="all")
    p.add_argument("--n", type=int, help="workload size (default: [workload] n_requests)")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("simulate", parents=[common], help="discrete-event latency simulation")
    p.add_argument("--framework", default="all")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--duplicates", type=float, help="fraction of injected duplicate prompts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", parents=[common], help="run the edge or cloud service")
    p.add_argument("role", choices=["edge", "cloud"])
    p.add_argument("--listen")
    p.add_argument("--backend")
    p.add_argument("--cloud", help="cloud address (edge only)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", parents=[common], help="send prompts to an edge service")
    p.add_argument("--send", required=True, help="file of prompts, one per line")
    p.add_argument("--edge", help="edge address host:port")
    p.add_argument("--metrics", help="edge metrics address host:port")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("popularity", parents=[common], help="popularity prediction baselines")
    p.add_argument("--csv")
    p.add_argument("--interval-hours", type=float)
    p.add_argument("--top", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--method", choices=["frequency", "markov1"])
    p.add_argument("--timestamp-col", default="timestamp")
    p.add_argument("--title-col", default="title")
    p.set_defaults(func=cmd_popularity)

    p = sub.add_parser("intent", parents=[common], help="intent keyword extraction scoring")
    p.add_argument("--dataset")
    p.add_argument("--extractor", choices=["rules", "backend"])
    p.add_argument("--backend", help="backend name for --extractor backend")
    p.set_defaults(func=cmd_intent)

    p = sub.add_parser("corpus", parents=[common], help="generate the edge fine-tuning corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corpus)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
        run = RunConfig(cfg, Path(args.out or cfg.get("output", "dir", "out")))
        return args.func(args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
