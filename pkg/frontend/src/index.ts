export { parseCsv, requireColumns, numericColumn, SchemaError } from "./csv.js";
export { fitLogSlope } from "./slope.js";
export {
  RENDERERS,
  loadInput,
  renderConvH,
  renderConvK,
  renderEnergy,
  renderRadial,
  renderResiduals,
  renderSlice,
} from "./figures.js";
export { runCli } from "./cli.js";
