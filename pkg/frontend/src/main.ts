import { CollectorClient } from "./api.js";
import { ConsoleApp } from "./app.js";
import { bind, render, wireOverrideRemoval } from "./dom.js";

// Served by the collector under /ui, so the API lives at the same origin.
const params = new URLSearchParams(window.location.search);
const host = params.get("host") ?? "";

const app = new ConsoleApp(new CollectorClient(""), host, render);
bind(app);
wireOverrideRemoval(app);
app.start(2000);
