"""Command-line surface: campaign orchestration and report generation.

Subcommands: probe-ips, scan-domains, grab, traffic, report, selftest.
Every campaign streams JSONL/CSV results with periodic checkpoints and
can be resumed with --resume <campaign-id>.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from . import altsvc, campaign, certs, domains, handshake, mockserver, probe, reports, traffic, wire
from .campaign import ConfigInvalid, ResumeDigestMismatch
from .pcap import read_pcap_flows
from .prefixes import OperatorMap, PrefixMap

BLOCKLIST_ENV = "QUIC_RECON_BLOCKLIST"


def _utcnow_iso() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"config file {path} must hold a mapping")
    return data


def _require(config: dict, key: str, kind: str) -> object:
    if key not in config:
        raise ConfigInvalid(f"{kind} config requires the {key!r} key")
    return config[key]


def _blocklist_from(config: dict) -> tuple[str, ...]:
    path = os.environ.get(BLOCKLIST_ENV) or config.get("blocklist")
    if not path:
        return ()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read blocklist {path}: {exc}") from exc
    entries = []
    for line in lines:
        text = line.split("#", 1)[0].strip()
        if text:
            entries.append(text)
    return tuple(entries)


def _campaign_id(args, kind: str, digest: str) -> str:
    if args.resume:
        return args.resume
    return f"{kind}-{digest[:12]}"


def _record_lines(records: Iterable[dict], fmt: str) -> Iterable[str]:
    if fmt == "jsonl":
        for record in records:
            yield json.dumps(record, separators=(",", ":"))
    else:
        for record in records:
            flat = {
                key: ";".join(str(v) for v in value) if isinstance(value, list) else value
                for key, value in record.items()
            }
            buffer = io.StringIO()
            writer = csv.writer(buffer)
            writer.writerow(flat.values())
            yield buffer.getvalue().strip("\r\n")


def _scan_config(config: dict, args) -> probe.ScanConfig:
    version_tag = config.get("probe_version_tag", "?123")
    return probe.ScanConfig(
        rate=float(args.rate or config.get("rate", 1000.0)),
        timeout=float(args.timeout or config.get("timeout", 12.0)),
        retries=int(config.get("retries", 0)),
        blocklist=_blocklist_from(config),
        shuffle=bool(config.get("shuffle", False)),
        probe_version=wire.make_unsupported_version(version_tag.encode("ascii")),
        pad_to=int(config.get("pad_to", 1200)),
    )


# ---------------------------------------------------------------------------
# subcommands

def cmd_probe_ips(args) -> int:
    config = _load_config(args.config)
    targets_path = str(_require(config, "targets", "probe-ips"))
    cfg = _scan_config(config, args)
    default_port = int(config.get("port", 443))
    with open(targets_path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    digest = campaign.digest_file(targets_path)
    out = Path(args.out or "probe_results.jsonl")

    def process(chunk: Sequence[str]) -> Iterable[str]:
        chunk_targets = list(probe.load_targets(chunk, default_port))
        records = (
            probe.outcome_record(target, outcome, _utcnow_iso())
            for target, outcome in probe.scan_targets(chunk_targets, cfg)
        )
        return _record_lines(records, args.format)

    state = campaign.run_checkpointed(
        campaign_id=_campaign_id(args, "probe", digest),
        items=lines,
        input_digest=digest,
        process=process,
        output_path=out,
        state_dir=args.state_dir or out.parent,
        config_snapshot={"kind": "probe-ips", "targets": targets_path},
        checkpoint_every=int(config.get("checkpoint_every", campaign.DEFAULT_CHECKPOINT_EVERY)),
        resume=bool(args.resume),
    )
    print(f"probe-ips: campaign {state.campaign_id} complete, results in {out}")
    return 0


def _domain_scan_config(config: dict, args) -> domains.DomainScanConfig:
    anchors: frozenset[bytes] = frozenset()
    if config.get("trust_anchors"):
        anchors = certs.load_anchor_file(str(config["trust_anchors"]))
    policy_name = config.get("bogon_policy", "default")
    if policy_name == "default":
        routable = domains.default_routable
    elif policy_name == "allow-loopback":
        routable = lambda addr: addr.is_loopback or domains.default_routable(addr)
    elif policy_name == "off":
        routable = lambda addr: True
    else:
        raise ConfigInvalid(f"unknown bogon_policy {policy_name!r}")
    params = handshake.HandshakeParams(
        version=wire.make_version(str(config.get("version", "Q035"))),
        max_rounds=int(config.get("max_rounds", 3)),
        timeout=float(args.timeout or config.get("timeout", 12.0)),
    )
    return domains.DomainScanConfig(
        port=int(config.get("port", 443)),
        handshake=params,
        trust_anchors=anchors,
        routable=routable,
    )


def _resolver_from(config: dict) -> domains.Resolver:
    section = config.get("resolver", {"type": "system"})
    if isinstance(section, str):
        section = {"type": section}
    kind = section.get("type", "system")
    if kind == "system":
        return domains.SystemResolver()
    if kind == "hosts":
        path = section.get("path")
        if not path:
            raise ConfigInvalid("hosts resolver requires a 'path'")
        with open(path, "r", encoding="utf-8") as fh:
            return domains.load_hosts_resolver(fh)
    raise ConfigInvalid(f"unknown resolver type {kind!r}")


def cmd_scan_domains(args) -> int:
    config = _load_config(args.config)
    domains_path = str(_require(config, "domains", "scan-domains"))
    scan_cfg = _domain_scan_config(config, args)
    resolver = _resolver_from(config)
    with open(domains_path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    digest = campaign.digest_file(domains_path)
    out = Path(args.out or "domain_verdicts.jsonl")

    def process(chunk: Sequence[str]) -> Iterable[str]:
        records = []
        for name in domains.load_domain_list(chunk):
            verdict = domains.scan_domain(name, resolver, scan_cfg)
            records.append(domains.verdict_record(name, verdict, _utcnow_iso()))
        return _record_lines(records, args.format)

    state = campaign.run_checkpointed(
        campaign_id=_campaign_id(args, "domains", digest),
        items=lines,
        input_digest=digest,
        process=process,
        output_path=out,
        state_dir=args.state_dir or out.parent,
        config_snapshot={"kind": "scan-domains", "domains": domains_path},
        checkpoint_every=int(config.get("checkpoint_every", campaign.DEFAULT_CHECKPOINT_EVERY)),
        resume=bool(args.resume),
    )

    summary_out = Path(config.get("summary_out") or f"{out}.summary.csv")
    summary = _summarize_verdict_file(out)
    with open(summary_out, "w", encoding="utf-8") as fh:
        fh.write("category,count,percentage\n")
        for name, count, pct in summary.csv_rows():
            fh.write(f"{name},{count},{pct:.2f}\n")
    print(
        f"scan-domains: campaign {state.campaign_id} complete, "
        f"verdicts in {out}, summary in {summary_out}"
    )
    return 0


def _summarize_verdict_file(path: Path) -> domains.ZoneSummary:
    counts = {category: 0 for category in domains.Category}
    cert_valid = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            counts[domains.Category(record["category"])] += 1
            if record.get("cert_valid"):
                cert_valid += 1
    return domains.ZoneSummary.from_counts(counts, cert_valid)


def cmd_grab(args) -> int:
    config = _load_config(args.config)
    hosts_path = str(_require(config, "hosts", "grab"))
    sni = str(config.get("sni", ""))
    anchors: frozenset[bytes] = frozenset()
    if config.get("trust_anchors"):
        anchors = certs.load_anchor_file(str(config["trust_anchors"]))
    params = handshake.HandshakeParams(
        sni=sni,
        version=wire.make_version(str(config.get("version", "Q035"))),
        max_rounds=int(config.get("max_rounds", 3)),
        timeout=float(args.timeout or config.get("timeout", 12.0)),
    )
    default_port = int(config.get("port", 443))
    with open(hosts_path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    digest = campaign.digest_file(hosts_path)
    out = Path(args.out or "grab_results.jsonl")

    def process(chunk: Sequence[str]) -> Iterable[str]:
        records = []
        for target in probe.load_targets(chunk, default_port):
            result = handshake.perform_handshake(target, params)
            cert_valid = None
            leaf_cn = None
            if result.certs is not None:
                leaf_cn = certs.leaf_common_name(result.certs)
                try:
                    verdict = certs.validate_certificate(
                        result.certs, sni, anchors, datetime.now(timezone.utc)
                    )
                    cert_valid = verdict.valid
                except certs.ParseError:
                    cert_valid = False
            records.append(
                handshake.result_record(target, result, sni, cert_valid, leaf_cn)
            )
        return _record_lines(records, args.format)

    state = campaign.run_checkpointed(
        campaign_id=_campaign_id(args, "grab", digest),
        items=lines,
        input_digest=digest,
        process=process,
        output_path=out,
        state_dir=args.state_dir or out.parent,
        config_snapshot={"kind": "grab", "hosts": hosts_path},
        checkpoint_every=int(config.get("checkpoint_every", campaign.DEFAULT_CHECKPOINT_EVERY)),
        resume=bool(args.resume),
    )
    print(f"grab: campaign {state.campaign_id} complete, results in {out}")
    return 0


def _load_traffic_inputs(config: dict):
    prefixes_path = config.get("prefixes")
    if prefixes_path:
        with open(prefixes_path, "r", encoding="utf-8") as fh:
            prefix_map = PrefixMap.from_csv(fh)
    else:
        prefix_map = PrefixMap()
    operators_path = config.get("operators")
    if operators_path:
        with open(operators_path, "r", encoding="utf-8") as fh:
            operator_map = OperatorMap.from_text(fh)
    else:
        operator_map = OperatorMap({})
    return prefix_map, operator_map


def _traffic_report(config: dict) -> traffic.ShareReport:
    flows_path = str(_require(config, "flows", "traffic"))
    prefix_map, operator_map = _load_traffic_inputs(config)
    local_prefixes = tuple(config.get("local_prefixes", ()))
    local_asns = tuple(int(a) for a in config.get("local_asns", ()))
    bin_seconds = float(config.get("bin_seconds", traffic.DEFAULT_BIN_SECONDS))
    weight = str(config.get("weight", "bytes"))
    if flows_path.endswith(".pcap") or config.get("pcap"):
        with open(flows_path, "rb") as fh:
            flows = list(read_pcap_flows(fh))
    else:
        with open(flows_path, "r", encoding="utf-8") as fh:
            flows = list(traffic.read_flows_csv(fh))
    return traffic.compute_shares(
        flows,
        prefix_map,
        operator_map,
        local_prefixes,
        bin_seconds=bin_seconds,
        local_asns=local_asns,
        weight=weight,
    )


def cmd_traffic(args) -> int:
    config = _load_config(args.config)
    report = _traffic_report(config)
    out = Path(args.out or "timeseries.csv")
    with open(out, "w", encoding="utf-8") as fh:
        traffic.emit_timeseries(report, fh)
    shares_out = config.get("shares_out")
    if shares_out:
        with open(shares_out, "w", encoding="utf-8") as fh:
            traffic.write_shares_csv(report, fh)
        print(f"traffic: time series in {out}, share matrices in {shares_out}")
    else:
        print(f"traffic: time series in {out}")
    return 0


def _iter_jsonl(path: str) -> Iterable[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def cmd_report(args) -> int:
    config = _load_config(args.config)
    produced = []

    if "version_sets" in config:
        section = config["version_sets"]
        tagged: dict[str, list[dict]] = {}
        skipped_parse = 0
        for item in _require(section, "inputs", "report.version_sets"):
            if isinstance(item, dict):
                date, path = str(item["date"]), str(item["path"])
                records = list(_iter_jsonl(path))
                tagged.setdefault(date, []).extend(records)
            else:
                for record in _iter_jsonl(str(item)):
                    ts = str(record.get("ts", ""))
                    tagged.setdefault(ts[:10] or "unknown", []).append(record)
        series = reports.aggregate_version_sets(
            tagged, threshold=int(section.get("threshold", 20_000))
        )
        out = Path(section.get("out", "version_sets.csv"))
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("date,version_set,hosts\n")
            for date, label, count in reports.version_set_csv_rows(series):
                fh.write(f"{date},{label},{count}\n")
        if series.skipped or skipped_parse:
            print(f"report: skipped {series.skipped} malformed records", file=sys.stderr)
        produced.append(str(out))

    if "cert_clusters" in config:
        section = config["cert_clusters"]
        records = _iter_jsonl(str(_require(section, "input", "report.cert_clusters")))
        cluster_report = reports.cluster_certificates(records)
        out = Path(section.get("out", "cert_clusters.csv"))
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("fingerprint,common_name,hosts,cumulative_coverage_pct\n")
            for row in reports.cert_cluster_csv_rows(cluster_report):
                fh.write(",".join(str(v) for v in row) + "\n")
        produced.append(str(out))

    if "attribution" in config:
        section = config["attribution"]
        prefix_map, operator_map = _load_traffic_inputs(section)
        rdns_rules = (
            reports.load_rules(open(section["rdns_rules"], encoding="utf-8"))
            if section.get("rdns_rules")
            else reports.default_rules("rdns")
        )
        cert_rules = (
            reports.load_rules(open(section["cert_rules"], encoding="utf-8"))
            if section.get("cert_rules")
            else reports.default_rules("cert")
        )
        out = Path(section.get("out", "attribution.csv"))
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("addr,asn,operator,rdns,cert_fingerprint\n")
            for record in _iter_jsonl(str(_require(section, "input", "report.attribution"))):
                observation = _observation_from(record)
                attributed = reports.attribute_host(
                    observation, prefix_map, operator_map, rdns_rules, cert_rules
                )
                fh.write(
                    f"{attributed.address},{attributed.asn if attributed.asn is not None else ''},"
                    f"{attributed.operator},{attributed.rdns_name or ''},"
                    f"{attributed.cert_fingerprint or ''}\n"
                )
        produced.append(str(out))

    if "traffic" in config:
        section = config["traffic"]
        report = _traffic_report(section)
        out = Path(section.get("out", "shares.csv"))
        with open(out, "w", encoding="utf-8") as fh:
            traffic.write_shares_csv(report, fh)
        produced.append(str(out))

    if not produced:
        raise ConfigInvalid(
            "report config needs at least one of: version_sets, cert_clusters, "
            "attribution, traffic"
        )
    print(f"report: wrote {', '.join(produced)}")
    return 0


def _observation_from(record: dict) -> reports.HostObservation:
    address = record.get("addr")
    if not address and "host" in record:
        address = str(record["host"]).rsplit(":", 1)[0]
    if not address:
        raise ConfigInvalid(f"attribution record without an address: {record}")
    fingerprints = record.get("cert_fingerprints") or []
    cert_names = list(record.get("cert_names") or [])
    if record.get("leaf_cn"):
        cert_names.append(str(record["leaf_cn"]))
    return reports.HostObservation(
        address=str(address),
        asn=record.get("asn"),
        rdns_name=record.get("rdns"),
        cert_fingerprint=fingerprints[0] if fingerprints else record.get("cert_fingerprint"),
        cert_names=tuple(cert_names),
    )


# ---------------------------------------------------------------------------
# selftest

def cmd_selftest(args) -> int:
    from .mockserver import Behavior, ResponderProfile, default_server_config, serve

    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"SELFTEST {name}: {'PASS' if ok else 'FAIL'}")
        if not ok:
            failures += 1

    cfg = probe.ScanConfig(rate=5000, timeout=0.5)
    q035 = wire.Q035

    matrix = [
        ("negotiate/version-mismatch", ResponderProfile(), False, probe.Verdict.VERSION_NEGOTIATION),
        ("negotiate/version-match", ResponderProfile(), True, probe.Verdict.TIMEOUT),
        ("reset", ResponderProfile(behavior=Behavior.RESET), False, probe.Verdict.PUBLIC_RESET),
        ("silent", ResponderProfile(behavior=Behavior.SILENT), False, probe.Verdict.TIMEOUT),
        ("malformed", ResponderProfile(behavior=Behavior.MALFORMED), False, probe.Verdict.MALFORMED),
        (
            "serve-rej/version-mismatch",
            ResponderProfile(behavior=Behavior.SERVE_REJ, scfg=default_server_config()),
            False,
            probe.Verdict.VERSION_NEGOTIATION,
        ),
    ]
    for name, profile, use_supported, expected in matrix:
        handle = serve(profile)
        try:
            attempt_cfg = probe.ScanConfig(
                rate=5000,
                timeout=0.5,
                probe_version=q035 if use_supported else cfg.probe_version,
            )
            outcome = probe.probe_one(
                probe.ProbeTarget("127.0.0.1", handle.port), attempt_cfg
            )
            check(f"probe {name}", outcome.verdict is expected)
        finally:
            handle.shutdown()

    scfg = default_server_config()
    handle = serve(ResponderProfile(behavior=Behavior.SERVE_REJ, scfg=scfg))
    try:
        result = handshake.perform_handshake(
            probe.ProbeTarget("127.0.0.1", handle.port),
            handshake.HandshakeParams(timeout=0.5),
        )
        check(
            "handshake extraction",
            result.status is handshake.HandshakeStatus.QUIC_ENABLED and result.scfg == scfg,
        )
    finally:
        handle.shutdown()

    message = wire.HandshakeMessage.from_tags(
        wire.TAG_CHLO, {wire.TAG_SNI: b"selftest.example", wire.TAG_VER: b"Q035"}
    )
    check(
        "codec round-trip",
        wire.decode_handshake_message(wire.encode_handshake_message(message)) == message,
    )

    pm = PrefixMap.from_entries([("10.0.0.0/8", 1)])
    om = OperatorMap({"probe": [1]})
    flows = [
        traffic.FlowRecord(0.0, "192.0.2.1", "10.0.0.1", "udp", 5000, 443, 100, 1)
    ]
    report = traffic.compute_shares(flows, pm, om, ("192.0.2.0/24",))
    check("traffic tally", report.overall_share()[traffic.Protocol.QUIC] == 1.0)

    print(f"selftest: {'all checks passed' if not failures else f'{failures} checks FAILED'}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quic-recon",
        description="Legacy-gQUIC reconnaissance and traffic-share toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("probe-ips", cmd_probe_ips),
        ("scan-domains", cmd_scan_domains),
        ("grab", cmd_grab),
        ("traffic", cmd_traffic),
        ("report", cmd_report),
        ("selftest", cmd_selftest),
    ):
        command = sub.add_parser(name)
        command.add_argument("--config", help="YAML/JSON config file")
        command.add_argument("--rate", type=float, help="packets per second override")
        command.add_argument("--timeout", type=float, help="timeout override, seconds")
        command.add_argument("--resume", metavar="ID", help="resume a checkpointed campaign")
        command.add_argument("--out", help="output path")
        command.add_argument(
            "--format", choices=("jsonl", "csv"), default="jsonl", help="record format"
        )
        command.add_argument("--state-dir", help="campaign state directory")
        command.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, ResumeDigestMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (probe.ProbeError, mockserver.BindFailed, altsvc.ConnectFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
