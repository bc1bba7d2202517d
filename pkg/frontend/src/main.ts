import { ApiClient } from "./api.js";
import { createApp } from "./render.js";

const params = new URLSearchParams(window.location.search);
const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

createApp({
  root,
  api: new ApiClient(""),
  period: params.get("period") ?? undefined,
  comparePeriod: params.get("compare") ?? undefined,
});
