from typing import Any, Dict, List, Sequence


class ResultFormatter:
    def combine_step_results(self, step_results: List[Dict[str, Any]]) -> str:
        """Combines results from multiple plan steps into a single report."""
        if not step_results:
            return "No steps were executed."

        if len(step_results) == 1:
            result_data = step_results[0].get("result", {})
            return str(result_data.get("result", "Unknown result"))

        lines = []
        for i, step in enumerate(step_results, 1):
            description = step.get("description", f"step {i}")
            result_data = step.get("result", {})
            status = "ok" if result_data.get("success", False) else "FAILED"
            lines.append(f"[{i}/{len(step_results)}] {description}: {status}")
            text = result_data.get("result")
            if text:
                lines.append(f"    {text}")
        passed = sum(1 for s in step_results if s.get("result", {}).get("success", False))
        lines.append(f"{passed}/{len(step_results)} steps succeeded")
        return "\n".join(lines)

    def format_table(self, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        """Fixed-width text table; floats use 6 significant digits."""
        cells = [[self._cell(v) for v in row] for row in rows]
        widths = [max(len(str(h)), *(len(r[i]) for r in cells)) if cells else len(str(h))
                  for i, h in enumerate(header)]
        out = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths)),
               "  ".join("-" * w for w in widths)]
        out.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
        return "\n".join(out)

    @staticmethod
    def _cell(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)
