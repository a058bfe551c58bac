/** swap handle and target of every pair: the second round drags the edit back */
export function swapPairs(points: number[][]): number[][] {
  return points.map(([px, py, gx, gy]) => [gx, gy, px, py]);
}
