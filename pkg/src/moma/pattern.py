"""Layer-pattern strings such as ``[TM]12`` or ``[T]12[M]12``.

Grammar (whitespace between tokens is ignored)::

    pattern := group+
    group   := '[' sym+ ']' count
    sym     := 'T' | 'M'
    count   := positive integer

Inside a group that contains a ``T``, each ``M`` attaches a Divide+Modulate
adapter to the nearest preceding ``T``; several ``M`` in a row stack several
adapters on that layer. A group made only of ``M`` adds standalone SSM layers
after the transformer stack, which requires at least one earlier ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass

from moma.errors import PatternError


@dataclass(frozen=True)
class LayerSpec:
    kind: str              # "transformer" or "decoder"
    modulators: int = 0    # adapters stacked on a transformer layer

    @property
    def modulated(self) -> bool:
        return self.kind == "transformer" and self.modulators > 0


@dataclass(frozen=True)
class LayerPattern:
    groups: tuple[tuple[str, int], ...]
    layers: tuple[LayerSpec, ...]

    @property
    def depth(self) -> int:
        return sum(1 for l in self.layers if l.kind == "transformer")

    @property
    def n_modulators(self) -> int:
        return sum(l.modulators for l in self.layers) + sum(1 for l in self.layers if l.kind == "decoder")

    def render(self) -> str:
        return "".join(f"[{syms}]{count}" for syms, count in self.groups)

    def symbols(self) -> str:
        return "".join(syms * count for syms, count in self.groups)


def _tokenize_groups(src: str) -> list[tuple[str, int, int]]:
    """Returns (symbols, count, start position) per group."""
    groups = []
    i, n = 0, len(src)

    def skip_ws(j):
        while j < n and src[j].isspace():
            j += 1
        return j

    i = skip_ws(i)
    if i == n:
        raise PatternError("empty pattern", i)
    while i < n:
        if src[i] != "[":
            raise PatternError(f"expected '[' but found {src[i]!r}", i)
        start = i
        i = skip_ws(i + 1)
        syms = []
        while i < n and src[i] in "TM":
            syms.append(src[i])
            i = skip_ws(i + 1)
        if i >= n:
            raise PatternError("unterminated group, expected ']'", i)
        if src[i] != "]":
            raise PatternError(f"unexpected symbol {src[i]!r}; only 'T' and 'M' are allowed", i)
        if not syms:
            raise PatternError("empty group", start)
        i = skip_ws(i + 1)
        j = i
        while j < n and src[j].isdigit():
            j += 1
        if j == i:
            raise PatternError("missing repeat count after ']'", i)
        count = int(src[i:j])
        if count < 1:
            raise PatternError("repeat count must be positive", i)
        groups.append(("".join(syms), count, start))
        i = skip_ws(j)
    return groups


def parse_pattern(src: str, depth: int | None = None) -> LayerPattern:
    """Parse and expand ``src``; ``depth`` (if given) must equal the number of T layers."""
    groups = _tokenize_groups(src)
    layers: list[LayerSpec] = []
    seen_transformer = seen_decoder = False
    for syms, count, start in groups:
        if "T" not in syms:
            if not seen_transformer:
                raise PatternError("modulation 'M' without a preceding transformer layer", start + 1)
            layers.extend(LayerSpec("decoder") for _ in range(len(syms) * count))
            seen_decoder = True
            continue
        if seen_decoder:
            raise PatternError("standalone 'M' groups must come after all transformer layers", start)
        if syms[0] == "M":
            raise PatternError("'M' must follow a 'T' inside its group", start + 1 + src[start + 1:].index("M"))
        for _ in range(count):
            for s in syms:
                if s == "T":
                    layers.append(LayerSpec("transformer"))
                else:
                    last = layers[-1]
                    layers[-1] = LayerSpec("transformer", last.modulators + 1)
        seen_transformer = True
    pattern = LayerPattern(tuple((s, c) for s, c, _ in groups), tuple(layers))
    if depth is not None and pattern.depth != depth:
        raise PatternError(f"pattern has {pattern.depth} transformer layers, backbone depth is {depth}", len(src))
    return pattern
