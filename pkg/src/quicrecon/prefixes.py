"""Longest-prefix-match IP-to-ASN lookup and the operator grouping map."""

from __future__ import annotations

import ipaddress
from typing import Iterable, Mapping

UNKNOWN_OPERATOR = "other"


class PrefixMap:
    """Binary trie per address family; lookup returns the ASN of the
    longest covering prefix, or None when nothing matches."""

    def __init__(self) -> None:
        # node: [zero-child, one-child, asn]
        self._roots = {4: [None, None, None], 6: [None, None, None]}

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, int]]) -> "PrefixMap":
        prefix_map = cls()
        for prefix, asn in entries:
            prefix_map.insert(prefix, asn)
        return prefix_map

    @classmethod
    def from_csv(cls, lines: Iterable[str]) -> "PrefixMap":
        """`prefix,asn` rows; an optional header row is skipped."""
        prefix_map = cls()
        for line in lines:
            text = line.split("#", 1)[0].strip()
            if not text or text.lower().startswith("prefix"):
                continue
            prefix, _, asn_text = text.partition(",")
            asn_text = asn_text.strip().upper().removeprefix("AS")
            prefix_map.insert(prefix.strip(), int(asn_text))
        return prefix_map

    def insert(self, prefix: str, asn: int) -> None:
        network = ipaddress.ip_network(prefix, strict=False)
        node = self._roots[network.version]
        bits = int(network.network_address)
        top = network.max_prefixlen - 1
        for depth in range(network.prefixlen):
            bit = (bits >> (top - depth)) & 1
            if node[bit] is None:
                node[bit] = [None, None, None]
            node = node[bit]
        node[2] = asn

    def lookup(self, address: str) -> int | None:
        parsed = ipaddress.ip_address(address)
        node = self._roots[parsed.version]
        bits = int(parsed)
        top = parsed.max_prefixlen - 1
        best = node[2]
        for depth in range(parsed.max_prefixlen):
            node = node[(bits >> (top - depth)) & 1]
            if node is None:
                break
            if node[2] is not None:
                best = node[2]
        return best


class OperatorMap:
    """Operator name -> ASN set; sets must be pairwise disjoint and
    anything unmatched maps to the distinguished "other" operator."""

    def __init__(self, mapping: Mapping[str, Iterable[int]]) -> None:
        self._by_asn: dict[int, str] = {}
        self._operators: dict[str, frozenset[int]] = {}
        for operator, asns in mapping.items():
            asn_set = frozenset(int(a) for a in asns)
            for asn in asn_set:
                if asn in self._by_asn:
                    raise ValueError(
                        f"AS{asn} claimed by both {self._by_asn[asn]!r} and {operator!r}"
                    )
                self._by_asn[asn] = operator
            self._operators[operator] = asn_set

    @classmethod
    def from_text(cls, lines: Iterable[str]) -> "OperatorMap":
        """`operator: asn,asn,...` per line, '#' comments."""
        mapping: dict[str, list[int]] = {}
        for line in lines:
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            operator, _, asn_text = text.partition(":")
            operator = operator.strip()
            if not operator or not asn_text.strip():
                raise ValueError(f"malformed operator line: {line!r}")
            asns = [
                int(item.strip().upper().removeprefix("AS"))
                for item in asn_text.split(",")
                if item.strip()
            ]
            mapping.setdefault(operator, []).extend(asns)
        return cls(mapping)

    @property
    def operators(self) -> tuple[str, ...]:
        return tuple(self._operators)

    def operator_for(self, asn: int | None) -> str:
        if asn is None:
            return UNKNOWN_OPERATOR
        return self._by_asn.get(asn, UNKNOWN_OPERATOR)
