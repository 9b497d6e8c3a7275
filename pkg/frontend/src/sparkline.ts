/** Return-over-iterations sparkline as an inline SVG path (pure string
 * construction, so snapshot-testable without a layout engine). */

export function sparklinePath(values: number[], width: number, height: number, pad = 2): string {
  if (values.length === 0) return "";
  if (values.length === 1) {
    const y = height / 2;
    return `M ${pad} ${y} L ${width - pad} ${y}`;
  }
  const min = Math.min(...values);
  const max = Math.max(...values);
  const span = max - min < 1e-12 ? 1 : max - min;
  const stepX = (width - 2 * pad) / (values.length - 1);
  return values
    .map((v, i) => {
      const x = pad + i * stepX;
      const y = height - pad - ((v - min) / span) * (height - 2 * pad);
      return `${i === 0 ? "M" : "L"} ${round2(x)} ${round2(y)}`;
    })
    .join(" ");
}

function round2(x: number): number {
  return Math.round(x * 100) / 100;
}

export function renderSparkline(el: Element, values: number[], width = 160, height = 36): void {
  const path = sparklinePath(values, width, height);
  el.innerHTML =
    `<svg viewBox="0 0 ${width} ${height}" width="${width}" height="${height}">` +
    `<path d="${path}" fill="none" stroke="#2563eb" stroke-width="1.5"/></svg>`;
}
